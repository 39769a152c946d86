fn main() {
    std::process::exit(tensor_mtl::cli::main_with_args(std::env::args_os()));
}
