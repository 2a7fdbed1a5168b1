fn main() {
    std::process::exit(reftrack::cli::run_command(std::env::args_os()));
}
