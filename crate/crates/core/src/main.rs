fn main() {
    std::process::exit(diffpolicy::cli::run_command(std::env::args_os()));
}
