fn main() {
    std::process::exit(amphase_cli::main_with(std::env::args_os()));
}
