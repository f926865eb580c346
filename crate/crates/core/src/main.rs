fn main() {
    std::process::exit(prtr::cli::run(std::env::args_os()));
}
