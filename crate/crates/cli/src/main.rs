fn main() {
    std::process::exit(ssmi_cli::main_with(std::env::args_os()));
}
