fn main() {
    std::process::exit(fcil_core::cli::main_from_env());
}
