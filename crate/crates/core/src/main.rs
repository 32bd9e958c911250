fn main() {
    std::process::exit(reid_compress::cli::cli_main(std::env::args()));
}
