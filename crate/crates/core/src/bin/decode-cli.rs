fn main() {
    std::process::exit(wavedecode::cli::main());
}
