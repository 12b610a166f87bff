fn main() {
    std::process::exit(ohformer::cli::run(std::env::args_os()));
}
