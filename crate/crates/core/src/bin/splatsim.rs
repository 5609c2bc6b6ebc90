fn main() {
    std::process::exit(splatsim::cli::run(std::env::args_os()));
}
