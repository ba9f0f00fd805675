fn main() {
    std::process::exit(sherlock_cli::run(std::env::args_os()));
}
