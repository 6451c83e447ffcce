fn main() {
    std::process::exit(mtgrec_cli::run(std::env::args_os()));
}
