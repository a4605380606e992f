fn main() {
    std::process::exit(dtot::cli::main());
}
