fn main() {
    std::process::exit(packed_he::cli::run_from(std::env::args_os()));
}
