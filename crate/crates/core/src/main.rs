fn main() {
    std::process::exit(shellnbody::harness::cli::run_cli(std::env::args_os()));
}
