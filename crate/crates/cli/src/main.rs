fn main() {
    std::process::exit(corrseg_cli::run(std::env::args_os()));
}
