fn main() {
    std::process::exit(great::cli::run())
}
