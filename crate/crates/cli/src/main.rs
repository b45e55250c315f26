fn main() {
    std::process::exit(uniseq_cli::run(std::env::args_os()));
}
