fn main() {
    std::process::exit(maekit::cli::run(std::env::args()));
}
