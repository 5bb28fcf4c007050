fn main() {
    std::process::exit(polarflow::cli::main_with_args(std::env::args_os()));
}
