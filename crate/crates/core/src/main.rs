fn main() {
    std::process::exit(matt::cli::run(std::env::args_os()));
}
