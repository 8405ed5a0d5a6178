fn main() {
    std::process::exit(milrank::cli::run(std::env::args_os()));
}
