fn main() {
    std::process::exit(unibias::cli::dispatch(std::env::args_os()));
}
