fn main() {
    std::process::exit(comcure::cli::run(std::env::args_os()));
}
