fn main() {
    std::process::exit(fusionpose::cli::run(std::env::args_os()));
}
