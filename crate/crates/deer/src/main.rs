fn main() {
    std::process::exit(deer::cli::run(std::env::args_os()));
}
