fn main() {
    std::process::exit(ddn_cli::run(std::env::args_os()));
}
