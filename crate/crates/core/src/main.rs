fn main() {
    std::process::exit(shapecorr::cli::main_with_args(std::env::args_os()));
}
