fn main() {
    std::process::exit(hyperfed::harness::run_cli(std::env::args_os()));
}
