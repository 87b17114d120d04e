fn main() {
    std::process::exit(hrrsteer::cli::main_with_args(std::env::args_os()));
}
