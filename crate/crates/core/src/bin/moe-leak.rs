fn main() {
    std::process::exit(moe_leak::cli::run(std::env::args_os()));
}
