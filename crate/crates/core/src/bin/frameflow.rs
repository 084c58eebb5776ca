fn main() {
    std::process::exit(frameflow::cli::run(std::env::args_os()));
}
