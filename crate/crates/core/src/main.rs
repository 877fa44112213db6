fn main() {
    std::process::exit(annofuse::cli::main_with_args(std::env::args_os()));
}
