fn main() {
    std::process::exit(indirec_core::orchestrator::cli::main_with(std::env::args_os()));
}
