fn main() {
    std::process::exit(kpfc::cli::run(std::env::args_os()));
}
