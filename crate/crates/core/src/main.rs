fn main() {
    std::process::exit(orefeed::cli::run(std::env::args_os()));
}
