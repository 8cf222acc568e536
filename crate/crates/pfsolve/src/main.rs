fn main() {
    std::process::exit(pfsolve::cli::run());
}
