fn main() {
    std::process::exit(detmatch::cli::main_with_args(std::env::args_os()));
}
