fn main() {
    std::process::exit(pocketnet::cli::run(std::env::args().collect()));
}
