fn main() {
    std::process::exit(memseg::cli::main_with_args(std::env::args_os()));
}
