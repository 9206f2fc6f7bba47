fn main() {
    std::process::exit(unlearn_cli::run_from_args(std::env::args_os()));
}
