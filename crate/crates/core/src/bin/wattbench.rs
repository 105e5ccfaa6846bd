fn main() {
    std::process::exit(wattbench::cli::run_from(std::env::args_os()));
}
