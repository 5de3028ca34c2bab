fn main() {
    std::process::exit(icf_index_cli::main_with(std::env::args_os()));
}
