fn main() {
    std::process::exit(kilnmap_cli::run(std::env::args_os()));
}
