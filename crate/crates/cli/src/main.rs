fn main() {
    std::process::exit(gamma_cli::run(std::env::args_os()));
}
