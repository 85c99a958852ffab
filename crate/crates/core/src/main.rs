fn main() {
    std::process::exit(recurlens::cli::main());
}
