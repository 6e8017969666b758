fn main() {
    std::process::exit(ptunifier::cli::run(std::env::args_os()));
}
