fn main() {
    std::process::exit(sat_refine::cli::run(std::env::args_os()));
}
