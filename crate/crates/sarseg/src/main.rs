fn main() {
    std::process::exit(sarseg::cli::run(std::env::args_os()));
}
