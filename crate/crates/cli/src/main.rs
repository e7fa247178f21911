fn main() {
    std::process::exit(lbp_inpaint_cli::run(std::env::args_os()));
}
