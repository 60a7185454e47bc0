fn main() {
    std::process::exit(dsgeo::cli::run(std::env::args_os()));
}
