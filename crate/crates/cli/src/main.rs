fn main() {
    std::process::exit(spectraseg_cli::run(std::env::args_os()));
}
