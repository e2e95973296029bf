//! File formats: text matrices, the run configuration, JSON-lines result
//! records and run manifests.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baseline::AdmmConfig;
use crate::error::{Error, Result};
use crate::kernels::{DipoleLayout, KernelKind, KernelSpec};
use crate::metrics::ScoreReport;
use crate::model::{GroupConfig, Hyperparams};
use crate::stream::{DEFAULT_BLOCK, DEFAULT_T_INIT};

/// Text form: a `rows cols` header, then one line per row of space-separated
/// values in shortest round-trip notation.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let mut first = true;
        for v in row.iter() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// Parses [`format_matrix`] output; `origin` names the source in errors.
pub fn parse_matrix(text: &str, origin: &str) -> Result<DMatrix<f64>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = loop {
        match lines.next() {
            None => return Err(err(1, "missing header".into())),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some(h) => break h,
        }
    };
    let dims: Vec<&str> = header.1.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| err(header.0, format!("bad dimension `{s}`")));
    let (rows, cols) = match dims.as_slice() {
        [r, c] => (parse_dim(r)?, parse_dim(c)?),
        _ => return Err(err(header.0, "header must be `rows cols`".into())),
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if seen == rows {
            return Err(err(no, format!("more than the {rows} rows declared")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| err(no, format!("bad number `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(err(no, format!("expected {cols} values, found {}", data.len() - before)));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(err(header.0 + seen + 1, format!("expected {rows} rows, found {seen}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn save_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, &path.display().to_string())
}

/// Boolean matrices are stored as 0/1 values.
pub fn save_mask(m: &DMatrix<bool>, path: &Path) -> Result<()> {
    save_matrix(&m.map(|b| if b { 1.0 } else { 0.0 }), path)
}

pub fn load_mask(path: &Path) -> Result<DMatrix<bool>> {
    let m = load_matrix(path)?;
    if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format {
            path: path.display().to_string(),
            message: format!("mask entries must be 0 or 1, found {v}"),
        });
    }
    Ok(m.map(|v| v == 1.0))
}

/// Voxel locations, one `x y z` line each; `#` starts a comment.
pub fn parse_locations(text: &str, origin: &str) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => out.push([v[0], v[1], v[2]]),
            _ => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    message: "expected three finite coordinates".into(),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: origin.to_string(),
            message: "no locations".into(),
        });
    }
    Ok(out)
}

pub fn load_locations(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_locations(&text, &path.display().to_string())
}

/// Everything a run needs besides its input and output paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hyper: Hyperparams,
    pub groups: GroupConfig,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub t_init: usize,
    pub block: usize,
    pub admm: AdmmConfig,
    /// Methods run by `bench`.
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Offline,
    Online,
    Admm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Offline => "offline",
            Method::Online => "online",
            Method::Admm => "admm",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "offline" => Some(Method::Offline),
            "online" => Some(Method::Online),
            "admm" => Some(Method::Admm),
            _ => None,
        }
    }
}

/// The hyperparameter-table keys; each must appear in a config file.
pub const MANDATORY_KEYS: [&str; 8] = [
    "sigma_x2",
    "sigma2",
    "eta",
    "xi",
    "ell_w",
    "ell_sigma",
    "alpha_w",
    "alpha_sigma",
];

/// Optional keys and their defaults.
pub const OPTIONAL_KEYS: [&str; 21] = [
    "tolerance",
    "max_iterations",
    "neg_var_replacement",
    "tilted_floor",
    "mu_prior_mean",
    "per_timestamp_covariances",
    "spatial_kernel",
    "locations",
    "distance_scale",
    "literal_distance",
    "n",
    "t_len",
    "n_groups",
    "target_sparsity",
    "value_variance",
    "move_prob",
    "ratios",
    "seeds",
    "t_init",
    "block",
    "methods",
];

const ADMM_KEYS: [&str; 4] = ["admm_rho", "admm_max_iters", "admm_abs_tol", "admm_rel_tol"];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::synthetic(),
            groups: GroupConfig::default(),
            ratios: (0..10).map(|k| (10 + 5 * k) as f64 / 100.0).collect(),
            seeds: (1..=10).collect(),
            t_init: DEFAULT_T_INIT,
            block: DEFAULT_BLOCK,
            admm: AdmmConfig::default(),
            methods: vec![Method::Offline, Method::Online, Method::Admm],
        }
    }
}

impl RunConfig {
    /// Parses flat `key = value` lines. `#` starts a comment, unknown keys are
    /// rejected and every hyperparameter-table key is required. A relative
    /// `locations` path is resolved against `base_dir`.
    pub fn parse(text: &str, origin: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut spatial_kind = "se".to_string();
        let mut layout: Option<DipoleLayout> = None;
        let (mut distance_scale, mut literal) = (1.0, false);
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: origin.to_string(),
                line: no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            if !MANDATORY_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) && !ADMM_KEYS.contains(&key) {
                return Err(bad(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("duplicate key `{key}`")));
            }
            let float = || value.parse::<f64>().map_err(|_| bad(format!("`{key}` expects a number, got `{value}`")));
            let int = || value.parse::<usize>().map_err(|_| bad(format!("`{key}` expects an integer, got `{value}`")));
            let boolean = || value.parse::<bool>().map_err(|_| bad(format!("`{key}` expects true or false, got `{value}`")));
            let h = &mut cfg.hyper;
            match key {
                "sigma_x2" => h.slab_var = float()?,
                "sigma2" => h.noise_var = float()?,
                "eta" => h.eta = float()?,
                "xi" => h.xi = float()?,
                "ell_w" => h.temporal.lengthscale = float()?,
                "ell_sigma" => h.spatial.lengthscale = float()?,
                "alpha_w" => h.temporal.amplitude = float()?,
                "alpha_sigma" => h.spatial.amplitude = float()?,
                "tolerance" => h.tolerance = float()?,
                "max_iterations" => h.max_iterations = int()?,
                "neg_var_replacement" => h.neg_var_replacement = float()?,
                "tilted_floor" => h.tilted_floor = float()?,
                "mu_prior_mean" => h.mu_prior_mean = float()?,
                "per_timestamp_covariances" => h.per_timestamp_covariances = boolean()?,
                "spatial_kernel" => {
                    if value != "se" && value != "dipole" {
                        return Err(bad(format!("`spatial_kernel` must be `se` or `dipole`, got `{value}`")));
                    }
                    spatial_kind = value.to_string();
                }
                "locations" => {
                    let p = Path::new(value);
                    let p = match base_dir {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p.to_path_buf(),
                    };
                    layout = Some(DipoleLayout::new(load_locations(&p)?));
                }
                "distance_scale" => distance_scale = float()?,
                "literal_distance" => literal = boolean()?,
                "n" => cfg.groups.n = int()?,
                "t_len" => cfg.groups.t_len = int()?,
                "n_groups" => cfg.groups.n_groups = int()?,
                "target_sparsity" => cfg.groups.target_sparsity = float()?,
                "value_variance" => cfg.groups.value_variance = float()?,
                "move_prob" => cfg.groups.move_prob = float()?,
                "ratios" => cfg.ratios = parse_list(value).map_err(|m| bad(format!("`ratios`: {m}")))?,
                "seeds" => cfg.seeds = parse_list(value).map_err(|m| bad(format!("`seeds`: {m}")))?,
                "t_init" => cfg.t_init = int()?,
                "block" => cfg.block = int()?,
                "methods" => {
                    cfg.methods = value
                        .split(',')
                        .map(|s| Method::parse(s.trim()).ok_or_else(|| bad(format!("unknown method `{}`", s.trim()))))
                        .collect::<Result<_>>()?
                }
                "admm_rho" => cfg.admm.rho = float()?,
                "admm_max_iters" => cfg.admm.max_iters = int()?,
                "admm_abs_tol" => cfg.admm.abs_tol = float()?,
                "admm_rel_tol" => cfg.admm.rel_tol = float()?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if let Some(missing) = MANDATORY_KEYS.iter().find(|k| !seen.contains(**k)) {
            return Err(Error::Config(format!("{origin}: missing mandatory key `{missing}`")));
        }
        if spatial_kind == "dipole" {
            let mut layout =
                layout.ok_or_else(|| Error::Config(format!("{origin}: `spatial_kernel = dipole` needs `locations`")))?;
            layout.distance_scale = distance_scale;
            layout.literal_distance = literal;
            let h = &mut cfg.hyper;
            h.spatial = KernelSpec::dipole(layout.clone(), h.spatial.amplitude, h.spatial.lengthscale);
            h.temporal = KernelSpec::dipole(layout, h.temporal.amplitude, h.temporal.lengthscale);
        } else if layout.is_some() {
            return Err(Error::Config(format!("{origin}: `locations` needs `spatial_kernel = dipole`")));
        }
        cfg.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.admm.validate()?;
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::invalid("ratios", format!("must lie in (0, 1], got {r}")));
        }
        if self.t_init == 0 || self.block == 0 {
            return Err(Error::invalid("t_init/block", "must be at least 1"));
        }
        Ok(())
    }

    /// Config text that [`RunConfig::parse`] maps back to `self`. Dipole
    /// layouts live in a separate file, so only squared-exponential kernels
    /// can be written back.
    pub fn to_config_string(&self) -> Result<String> {
        let h = &self.hyper;
        if !matches!(h.spatial.kind, KernelKind::SquaredExponential)
            || !matches!(h.temporal.kind, KernelKind::SquaredExponential)
        {
            return Err(Error::Config("only squared-exponential kernels can be written back".into()));
        }
        let join = |v: Vec<String>| v.join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        };
        kv("sigma_x2", format!("{:?}", h.slab_var));
        kv("sigma2", format!("{:?}", h.noise_var));
        kv("eta", format!("{:?}", h.eta));
        kv("xi", format!("{:?}", h.xi));
        kv("ell_w", format!("{:?}", h.temporal.lengthscale));
        kv("ell_sigma", format!("{:?}", h.spatial.lengthscale));
        kv("alpha_w", format!("{:?}", h.temporal.amplitude));
        kv("alpha_sigma", format!("{:?}", h.spatial.amplitude));
        kv("tolerance", format!("{:?}", h.tolerance));
        kv("max_iterations", h.max_iterations.to_string());
        kv("neg_var_replacement", format!("{:?}", h.neg_var_replacement));
        kv("tilted_floor", format!("{:?}", h.tilted_floor));
        kv("mu_prior_mean", format!("{:?}", h.mu_prior_mean));
        kv("per_timestamp_covariances", h.per_timestamp_covariances.to_string());
        let g = &self.groups;
        kv("n", g.n.to_string());
        kv("t_len", g.t_len.to_string());
        kv("n_groups", g.n_groups.to_string());
        kv("target_sparsity", format!("{:?}", g.target_sparsity));
        kv("value_variance", format!("{:?}", g.value_variance));
        kv("move_prob", format!("{:?}", g.move_prob));
        kv("ratios", join(self.ratios.iter().map(|r| format!("{r:?}")).collect()));
        kv("seeds", join(self.seeds.iter().map(|s| s.to_string()).collect()));
        kv("t_init", self.t_init.to_string());
        kv("block", self.block.to_string());
        kv("methods", join(self.methods.iter().map(|m| m.name().to_string()).collect()));
        kv("admm_rho", format!("{:?}", self.admm.rho));
        kv("admm_max_iters", self.admm.max_iters.to_string());
        kv("admm_abs_tol", format!("{:?}", self.admm.abs_tol));
        kv("admm_rel_tol", format!("{:?}", self.admm.rel_tol));
        Ok(s)
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    let items: std::result::Result<Vec<T>, _> = value.split(',').map(|s| s.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        Ok(_) => Err("empty list".into()),
        Err(_) => Err(format!("cannot parse `{value}`")),
    }
}

/// One scored run, one JSON object per line in a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub ratio: f64,
    pub seed: u64,
    pub report: ScoreReport,
    pub iterations: usize,
    pub wall_time_secs: f64,
}

/// Appends records to a JSON-lines file, creating it if needed.
pub fn append_records(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Enough to repeat a run: the subcommand arguments and the full config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    /// Subcommand name and arguments, output directory excluded.
    pub command: Vec<String>,
    /// Config text accepted by [`RunConfig::parse`].
    pub config: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(command: Vec<String>, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config: cfg.to_config_string()?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
