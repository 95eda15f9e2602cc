fn main() {
    std::process::exit(circuitscope::cli::main_with_args(std::env::args_os()));
}
