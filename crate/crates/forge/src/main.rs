fn main() {
    std::process::exit(forge::run_command(std::env::args_os()));
}
