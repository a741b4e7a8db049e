fn main() {
    std::process::exit(consac_cli::run_command(std::env::args_os()));
}
