fn main() {
    std::process::exit(disengcd::cli::run(std::env::args_os()));
}
