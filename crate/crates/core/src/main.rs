fn main() {
    std::process::exit(p2lr::cli::main());
}
