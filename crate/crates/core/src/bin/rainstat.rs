fn main() {
    std::process::exit(rainstat::cli::main_with_args(std::env::args_os()));
}
