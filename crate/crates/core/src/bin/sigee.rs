fn main() {
    std::process::exit(sigee::cli::run(std::env::args_os()));
}
