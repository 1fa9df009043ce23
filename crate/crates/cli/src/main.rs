fn main() {
    std::process::exit(evaflow_cli::run(std::env::args_os()));
}
