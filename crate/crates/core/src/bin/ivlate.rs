fn main() {
    std::process::exit(ivlate::cli::run_cli(std::env::args_os()));
}
