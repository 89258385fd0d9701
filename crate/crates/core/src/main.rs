fn main() {
    std::process::exit(ttu_core::cli::run(std::env::args_os()));
}
