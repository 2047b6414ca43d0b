fn main() {
    std::process::exit(ldgm_cli::main_with(std::env::args().collect()));
}
