fn main() {
    std::process::exit(delayformer::cli::run_cli(std::env::args_os()));
}
