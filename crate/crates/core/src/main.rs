fn main() {
    std::process::exit(multibarf::cli::run(std::env::args_os()));
}
