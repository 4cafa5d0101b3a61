fn main() {
    std::process::exit(hsprobe_cli::run(std::env::args_os()));
}
