fn main() {
    std::process::exit(remoe_core::cli::dispatch(std::env::args_os()));
}
