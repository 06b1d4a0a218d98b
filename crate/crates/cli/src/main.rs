fn main() {
    std::process::exit(pcam_cli::run(std::env::args_os()));
}
