fn main() {
    std::process::exit(evo_depth::cli::main_with_args(std::env::args_os()));
}
