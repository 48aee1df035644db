fn main() {
    std::process::exit(attrnet_cli::dispatch(std::env::args_os()));
}
