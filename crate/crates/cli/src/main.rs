fn main() {
    std::process::exit(sbcformer_cli::run(std::env::args_os()));
}
