fn main() {
    std::process::exit(tabrag::cli::run(std::env::args_os()));
}
