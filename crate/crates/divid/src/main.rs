fn main() {
    std::process::exit(divid::cli::main(std::env::args_os()));
}
