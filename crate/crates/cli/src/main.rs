fn main() {
    std::process::exit(overtake_cli::cli::run(std::env::args_os()));
}
