fn main() {
    std::process::exit(msst_cli::run_cli(std::env::args_os()));
}
