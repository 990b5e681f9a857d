fn main() {
    std::process::exit(margin_ffcl::cli::run(std::env::args_os()));
}
