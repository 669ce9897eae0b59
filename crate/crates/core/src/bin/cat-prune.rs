fn main() {
    std::process::exit(cat_prune_core::cli::main_with_args(std::env::args_os()));
}
