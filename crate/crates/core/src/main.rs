fn main() {
    std::process::exit(holalign::cli::main_with_args(std::env::args()));
}
