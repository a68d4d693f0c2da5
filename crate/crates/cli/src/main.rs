fn main() {
    std::process::exit(robopt_cli::run(std::env::args_os()));
}
