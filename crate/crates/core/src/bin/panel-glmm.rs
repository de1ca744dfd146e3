fn main() {
    std::process::exit(panel_glmm::cli::main_with_args(std::env::args_os()));
}
