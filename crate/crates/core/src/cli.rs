//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::baseline::{select_lambda_fraction, LassoAdmm, HELD_OUT_SEED};
use crate::ep::{run_offline, Diagnostics, PosteriorSummary};
use crate::error::{Error, Result};
use crate::io::{
    append_records, load_mask, load_matrix, save_mask, save_matrix, Manifest, Method, ResultRecord, RunConfig,
};
use crate::metrics::{score, support, support_from_spikes, ScoreReport, SupportRule};
use crate::model::{synthetic_instance, Dataset};
use crate::stream::run_stream;

pub const DESIGN_FILE: &str = "design.txt";
pub const OBSERVATIONS_FILE: &str = "observations.txt";
pub const SIGNAL_FILE: &str = "signal.txt";
pub const SPIKES_FILE: &str = "spikes.txt";
pub const X_MEAN_FILE: &str = "x_mean.txt";
pub const X_VAR_FILE: &str = "x_var.txt";
pub const SPIKE_PROB_FILE: &str = "spike_prob.txt";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.tsv";

#[derive(Debug, Parser)]
#[command(name = "hgpss", version, about = "Sparse signal recovery with a two-level GP spike-and-slab prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Draw a synthetic moving-groups instance with its ground truth.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Undersampling ratio K/N.
        #[arg(long, default_value_t = 0.3)]
        ratio: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline EP over a whole dataset.
    Recover {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online filtering: warm start on a prefix, then blocks of new timestamps.
    Stream {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured prefix length.
        #[arg(long)]
        t_init: Option<usize>,
        /// Overrides the configured block size.
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimate against the ground truth of a dataset.
    Eval {
        /// Dataset directory with `signal.txt` and `spikes.txt`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `recover` or `stream`.
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long, value_enum, default_value_t = RuleArg::Auto)]
        rule: RuleArg,
        /// Score file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratio × seed × method sweep on synthetic data.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the run recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    /// Posterior rule when the estimate has spike probabilities, else magnitude.
    Auto,
    Posterior,
    Magnitude,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match &command {
        Command::Replay { manifest, out } => replay(manifest, out),
        _ => {
            let cfg = match config_path(&command) {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            run(&command, &cfg)
        }
    }
}

fn config_path(command: &Command) -> Option<&PathBuf> {
    match command {
        Command::Generate { config, .. }
        | Command::Recover { config, .. }
        | Command::Stream { config, .. }
        | Command::Bench { config, .. } => config.as_ref(),
        Command::Eval { .. } | Command::Replay { .. } => None,
    }
}

fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let cfg = RunConfig::parse(&m.config, &manifest.display().to_string(), None)?;
    let mut argv = vec!["hgpss".to_string()];
    argv.extend(m.command.iter().cloned());
    argv.push("--out".into());
    argv.push(out.display().to_string());
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Format {
        path: manifest.display().to_string(),
        message: format!("recorded command does not parse: {e}"),
    })?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::Format {
            path: manifest.display().to_string(),
            message: "a manifest cannot record a replay".into(),
        });
    }
    run(&cli.command, &cfg)
}

/// Arguments that reproduce `command` with the config taken from a manifest.
fn recorded_args(command: &Command) -> Result<Vec<String>> {
    let abs = |p: &Path| -> Result<String> {
        Ok(fs::canonicalize(p).map_err(|e| Error::io(p, e))?.display().to_string())
    };
    Ok(match command {
        Command::Generate { ratio, seed, .. } => vec![
            "generate".into(),
            "--ratio".into(),
            format!("{ratio:?}"),
            "--seed".into(),
            seed.to_string(),
        ],
        Command::Recover { data, .. } => vec!["recover".into(), "--data".into(), abs(data)?],
        Command::Stream {
            data, t_init, block, ..
        } => {
            let mut v = vec!["stream".into(), "--data".into(), abs(data)?];
            if let Some(t) = t_init {
                v.extend(["--t-init".into(), t.to_string()]);
            }
            if let Some(b) = block {
                v.extend(["--block".into(), b.to_string()]);
            }
            v
        }
        Command::Eval { data, estimate, rule, .. } => vec![
            "eval".into(),
            "--data".into(),
            abs(data)?,
            "--estimate".into(),
            abs(estimate)?,
            "--rule".into(),
            rule.to_possible_value().expect("no skipped variants").get_name().to_string(),
        ],
        Command::Bench { .. } => vec!["bench".into()],
        Command::Replay { .. } => unreachable!("replay is resolved before running"),
    })
}

fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::new(recorded_args(command)?, cfg)?;
    match command {
        Command::Generate { ratio, seed, out, .. } => {
            let d = synthetic_instance(&cfg.groups, *ratio, *seed)?;
            create_dir(out)?;
            save_dataset(&d, out)?;
            manifest.save(out)
        }
        Command::Recover { data, out, .. } => {
            let d = load_dataset(data)?;
            let (_, summary, diag) = run_offline(&d, &cfg.hyper)?;
            create_dir(out)?;
            save_summary(&summary, out)?;
            write_json(&out.join("diagnostics.json"), &diag)?;
            manifest.save(out)
        }
        Command::Stream {
            data,
            t_init,
            block,
            out,
            ..
        } => {
            let d = load_dataset(data)?;
            let t_init = t_init.unwrap_or(cfg.t_init).min(d.t_len());
            let s = run_stream(&d, &cfg.hyper, t_init, block.unwrap_or(cfg.block))?;
            create_dir(out)?;
            save_summary(&s.summary(), out)?;
            let mut blocks = String::new();
            for b in s.blocks() {
                blocks.push_str(&serde_json::to_string(b)?);
                blocks.push('\n');
            }
            let p = out.join("blocks.jsonl");
            fs::write(&p, blocks).map_err(|e| Error::io(&p, e))?;
            manifest.save(out)
        }
        Command::Eval {
            data,
            estimate,
            rule,
            out,
        } => {
            let report = evaluate(data, estimate, *rule)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_json(out, &report)
        }
        Command::Bench { out, .. } => {
            create_dir(out)?;
            let records = bench(cfg, &out.join(RESULTS_FILE))?;
            write_summary_table(&records, &out.join(SUMMARY_FILE))?;
            manifest.save(out)
        }
        Command::Replay { .. } => unreachable!("replay is resolved before running"),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    save_matrix(&d.design, &dir.join(DESIGN_FILE))?;
    save_matrix(&d.observations, &dir.join(OBSERVATIONS_FILE))?;
    if let Some(s) = &d.signal {
        save_matrix(s, &dir.join(SIGNAL_FILE))?;
    }
    if let Some(s) = &d.spikes {
        save_mask(s, &dir.join(SPIKES_FILE))?;
    }
    Ok(())
}

/// Reads a dataset directory; the truth files are optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let d = Dataset::new(load_matrix(&dir.join(DESIGN_FILE))?, load_matrix(&dir.join(OBSERVATIONS_FILE))?)?;
    let signal_path = dir.join(SIGNAL_FILE);
    if !signal_path.exists() {
        return Ok(d);
    }
    let signal = load_matrix(&signal_path)?;
    let spikes_path = dir.join(SPIKES_FILE);
    let spikes = if spikes_path.exists() {
        Some(load_mask(&spikes_path)?)
    } else {
        None
    };
    d.with_truth(signal, spikes)
}

fn save_summary(s: &PosteriorSummary, dir: &Path) -> Result<()> {
    save_matrix(&s.x_mean, &dir.join(X_MEAN_FILE))?;
    save_matrix(&s.x_var, &dir.join(X_VAR_FILE))?;
    save_matrix(&s.spike_prob, &dir.join(SPIKE_PROB_FILE))
}

fn evaluate(data: &Path, estimate: &Path, rule: RuleArg) -> Result<ScoreReport> {
    let d = load_dataset(data)?;
    let (Some(signal), Some(spikes)) = (&d.signal, &d.spikes) else {
        return Err(Error::Format {
            path: data.display().to_string(),
            message: format!("no ground truth ({SIGNAL_FILE})"),
        });
    };
    let x = load_matrix(&estimate.join(X_MEAN_FILE))?;
    let prob_path = estimate.join(SPIKE_PROB_FILE);
    let use_posterior = match rule {
        RuleArg::Auto => prob_path.exists(),
        RuleArg::Posterior => true,
        RuleArg::Magnitude => false,
    };
    let est_support = if use_posterior {
        support(&load_matrix(&prob_path)?, SupportRule::Posterior)
    } else {
        support(&x, SupportRule::default())
    };
    score(signal, &support_from_spikes(spikes), &x, &est_support)
}

/// Runs every configured (ratio, seed, method) cell, appending one record per
/// cell to `results` as it finishes.
pub fn bench(cfg: &RunConfig, results: &Path) -> Result<Vec<ResultRecord>> {
    if cfg.seeds.contains(&HELD_OUT_SEED) {
        return Err(Error::Config(format!(
            "seed {HELD_OUT_SEED} is reserved for selecting the lasso weight"
        )));
    }
    let mut all = Vec::new();
    for &ratio in &cfg.ratios {
        let fraction = if cfg.methods.contains(&Method::Admm) {
            let held = synthetic_instance(&cfg.groups, ratio, HELD_OUT_SEED)?;
            Some(select_lambda_fraction(&held, cfg.admm)?)
        } else {
            None
        };
        for &seed in &cfg.seeds {
            let d = synthetic_instance(&cfg.groups, ratio, seed)?;
            for &method in &cfg.methods {
                let rec = bench_cell(cfg, &d, method, ratio, seed, fraction)?;
                eprintln!(
                    "{:<8} ratio {:.2} seed {:>3}: F {:.3} NMSE {:.2e} ({} iterations, {:.1}s)",
                    rec.method, ratio, seed, rec.report.f_measure, rec.report.nmse, rec.iterations, rec.wall_time_secs
                );
                append_records(results, std::slice::from_ref(&rec))?;
                all.push(rec);
            }
        }
    }
    Ok(all)
}

fn bench_cell(
    cfg: &RunConfig,
    d: &Dataset,
    method: Method,
    ratio: f64,
    seed: u64,
    lambda_fraction: Option<f64>,
) -> Result<ResultRecord> {
    let signal = d.signal.as_ref().expect("synthetic data has truth");
    let truth = support_from_spikes(d.spikes.as_ref().expect("synthetic data has truth"));
    let start = Instant::now();
    let (report, iterations) = match method {
        Method::Offline => {
            let (_, s, diag): (_, PosteriorSummary, Diagnostics) = run_offline(d, &cfg.hyper)?;
            let est = support(&s.spike_prob, SupportRule::Posterior);
            (score(signal, &truth, &s.x_mean, &est)?, diag.iterations)
        }
        Method::Online => {
            let st = run_stream(d, &cfg.hyper, cfg.t_init.min(d.t_len()), cfg.block)?;
            let s = st.summary();
            let est = support(&s.spike_prob, SupportRule::Posterior);
            let iterations = st.blocks().iter().map(|b| b.iterations).sum();
            (score(signal, &truth, &s.x_mean, &est)?, iterations)
        }
        Method::Admm => {
            let fraction = lambda_fraction.expect("selected when the lasso is benchmarked");
            let (x, reports) = LassoAdmm::new(&d.design, cfg.admm)?.solve_relative(&d.observations, fraction)?;
            let est = support(&x, SupportRule::default());
            let iterations = reports.iter().map(|r| r.iterations).sum();
            (score(signal, &truth, &x, &est)?, iterations)
        }
    };
    Ok(ResultRecord {
        method: method.name().to_string(),
        ratio,
        seed,
        report,
        iterations,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Means per (method, ratio), tab-separated with a header row.
pub fn write_summary_table(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut groups: BTreeMap<(String, u64), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.ratio.to_bits())).or_default().push(r);
    }
    let mut text = String::from("method\tratio\tmean_f_measure\tmean_nmse\tmean_iterations\tsamples\n");
    let mut rows: Vec<_> = groups.into_iter().collect();
    rows.sort_by(|a, b| a.0 .0.cmp(&b.0 .0).then(f64::from_bits(a.0 .1).total_cmp(&f64::from_bits(b.0 .1))));
    for ((method, ratio), rs) in rows {
        let k = rs.len() as f64;
        let mean = |f: &dyn Fn(&ResultRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / k;
        text.push_str(&format!(
            "{method}\t{}\t{}\t{}\t{}\t{}\n",
            f64::from_bits(ratio),
            mean(&|r| r.report.f_measure),
            mean(&|r| r.report.nmse),
            mean(&|r| r.iterations as f64),
            rs.len()
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
