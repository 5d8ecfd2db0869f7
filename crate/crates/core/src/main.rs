fn main() {
    std::process::exit(mia_former::cli::run(std::env::args_os()));
}
