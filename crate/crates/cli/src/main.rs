fn main() {
    std::process::exit(ddnet_cli::main_with_args(std::env::args_os()));
}
