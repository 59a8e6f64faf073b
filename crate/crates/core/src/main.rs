fn main() {
    std::process::exit(cxrgen::cli::run(std::env::args_os()));
}
