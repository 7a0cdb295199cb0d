fn main() {
    std::process::exit(lpsnet::cli::main());
}
