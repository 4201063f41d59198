fn main() {
    std::process::exit(lgb::cli::main_with(std::env::args_os()));
}
