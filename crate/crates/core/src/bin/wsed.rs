fn main() {
    std::process::exit(wsed_core::cli::run(std::env::args_os()));
}
