fn main() {
    std::process::exit(attribute_mix::harness::cli::main());
}
