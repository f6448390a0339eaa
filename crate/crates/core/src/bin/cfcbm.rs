fn main() {
    std::process::exit(cfcbm::cli::run(std::env::args_os()));
}
