fn main() {
    std::process::exit(crossdiff_cli::app::main_with_args(std::env::args_os()));
}
