fn main() {
    std::process::exit(fabme::cli::run(std::env::args_os()));
}
