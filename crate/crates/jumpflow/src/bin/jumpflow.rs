fn main() {
    std::process::exit(jumpflow::cli::run());
}
