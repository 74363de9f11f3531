fn main() {
    std::process::exit(saig::cli::run(std::env::args_os()));
}
