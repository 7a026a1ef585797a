fn main() {
    std::process::exit(vecsketch::run_cli(std::env::args_os()));
}
