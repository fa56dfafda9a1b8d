fn main() {
    std::process::exit(locmoe::cli::run_from(std::env::args_os()));
}
