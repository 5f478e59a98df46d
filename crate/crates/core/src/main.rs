fn main() {
    std::process::exit(vadd::cli::run(std::env::args_os()));
}
