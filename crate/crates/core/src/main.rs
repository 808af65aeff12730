fn main() {
    std::process::exit(ioulmm::cli::run(std::env::args_os()));
}
