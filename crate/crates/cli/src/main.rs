fn main() {
    std::process::exit(wxadapt_cli::main_with_args(std::env::args_os()));
}
