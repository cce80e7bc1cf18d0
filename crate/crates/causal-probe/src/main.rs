fn main() {
    std::process::exit(causal_probe::cli::run_from_args(std::env::args_os()));
}
