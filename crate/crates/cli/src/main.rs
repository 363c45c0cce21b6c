fn main() {
    std::process::exit(gmm_ddpm_cli::run_cli(std::env::args_os()));
}
