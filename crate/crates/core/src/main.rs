fn main() {
    std::process::exit(unifeat::cli::run(std::env::args_os()));
}
