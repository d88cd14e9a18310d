fn main() {
    std::process::exit(crystal_cli::dispatch(std::env::args_os()));
}
