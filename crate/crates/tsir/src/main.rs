fn main() {
    std::process::exit(tsir::cli::run());
}
