fn main() {
    std::process::exit(finermoe::cli::run(std::env::args_os()));
}
