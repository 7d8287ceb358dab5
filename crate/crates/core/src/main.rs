fn main() {
    std::process::exit(mmoe_core::cli::run(std::env::args_os()));
}
