fn main() {
    std::process::exit(synct_cli::run(std::env::args_os()));
}
