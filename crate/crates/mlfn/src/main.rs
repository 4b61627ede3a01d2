fn main() {
    std::process::exit(mlfn::cli::main_with_args(std::env::args_os()));
}
