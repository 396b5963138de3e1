fn main() {
    std::process::exit(labelmend::cli::run(std::env::args_os()));
}
