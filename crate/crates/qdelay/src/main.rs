fn main() {
    std::process::exit(qdelay::cli::run(std::env::args().skip(1)));
}
