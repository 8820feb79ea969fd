fn main() {
    std::process::exit(seqmask::cli::main_with_args(std::env::args_os()));
}
