fn main() {
    std::process::exit(scenereg::cli::main_with_args(std::env::args_os()));
}
