fn main() {
    std::process::exit(mt_adapt::cli::run(std::env::args_os()));
}
