fn main() {
    std::process::exit(mps::cli::dispatch(std::env::args_os()));
}
