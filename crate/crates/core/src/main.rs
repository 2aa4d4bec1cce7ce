fn main() {
    std::process::exit(ctal::cli::main_with_args(std::env::args_os()));
}
