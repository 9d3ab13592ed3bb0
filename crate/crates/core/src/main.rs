fn main() {
    std::process::exit(cosi::cli::run(std::env::args_os()));
}
