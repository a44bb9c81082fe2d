fn main() {
    std::process::exit(removal_engine::cli::main_with_args(std::env::args_os()));
}
