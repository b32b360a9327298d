fn main() {
    std::process::exit(endonav::cli::run(std::env::args_os()));
}
