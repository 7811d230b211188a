fn main() {
    std::process::exit(tarec::cli::run_cli(std::env::args_os()));
}
