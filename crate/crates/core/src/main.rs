fn main() {
    std::process::exit(fogdet::cli::run(std::env::args_os()));
}
