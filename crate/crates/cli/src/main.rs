fn main() {
    std::process::exit(shiftquant_cli::run(std::env::args_os()));
}
