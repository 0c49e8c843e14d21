fn main() {
    std::process::exit(siamup::cli::dispatch(std::env::args()));
}
