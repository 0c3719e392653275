fn main() {
    std::process::exit(scenescript::cli::run());
}
