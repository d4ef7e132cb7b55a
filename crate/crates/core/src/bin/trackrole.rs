fn main() {
    std::process::exit(trackrole::cli::run(std::env::args_os()));
}
