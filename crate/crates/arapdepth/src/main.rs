fn main() {
    std::process::exit(arapdepth::cli::run(std::env::args_os()));
}
