fn main() {
    std::process::exit(fedunlearn::cli::run(std::env::args_os()));
}
