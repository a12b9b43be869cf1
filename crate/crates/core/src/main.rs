fn main() {
    std::process::exit(pkmem::cli::main_with(std::env::args_os()));
}
