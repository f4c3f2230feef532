fn main() {
    std::process::exit(orchardfuse::cli::run_command(std::env::args_os()));
}
