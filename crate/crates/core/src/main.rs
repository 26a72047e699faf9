fn main() {
    std::process::exit(mftnet::cli::main_with(std::env::args_os()));
}
