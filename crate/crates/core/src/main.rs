fn main() {
    std::process::exit(hydromarket::cli::run_cli());
}
