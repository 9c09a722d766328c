fn main() {
    std::process::exit(webster_flow::cli::main_with_args(std::env::args_os()));
}
