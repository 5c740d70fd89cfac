fn main() {
    std::process::exit(timeslice_cli::cli_run(std::env::args_os()));
}
