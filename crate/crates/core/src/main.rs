fn main() {
    std::process::exit(metsk::cli::dispatch(std::env::args_os()));
}
