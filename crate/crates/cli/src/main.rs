fn main() {
    std::process::exit(petkit_cli::run(std::env::args_os()));
}
