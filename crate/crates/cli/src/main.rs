fn main() {
    std::process::exit(callstep_cli::run(std::env::args_os()));
}
