fn main() {
    std::process::exit(bacap_cli::run(std::env::args_os()));
}
