fn main() {
    std::process::exit(trh::cli::main_with(std::env::args_os()));
}
