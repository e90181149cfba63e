fn main() {
    std::process::exit(pancut::cli::run_from(std::env::args_os()));
}
