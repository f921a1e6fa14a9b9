fn main() {
    std::process::exit(vpnext_harness::cli::main_with(std::env::args_os()));
}
