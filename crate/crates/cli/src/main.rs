fn main() {
    std::process::exit(rotview_cli::cli_main(std::env::args_os()));
}
