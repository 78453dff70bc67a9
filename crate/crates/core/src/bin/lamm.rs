fn main() {
    std::process::exit(lamm_core::cli::main());
}
