fn main() {
    std::process::exit(hgp_spikeslab::cli::cli_main(std::env::args_os()));
}
