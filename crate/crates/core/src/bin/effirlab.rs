fn main() {
    std::process::exit(effirlab::cli::run_cli(std::env::args_os()));
}
