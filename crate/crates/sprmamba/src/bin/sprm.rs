fn main() {
    std::process::exit(sprmamba::cli::run())
}
