fn main() {
    std::process::exit(fednsim::cli::cli_main(std::env::args_os()));
}
