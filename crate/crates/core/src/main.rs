fn main() {
    std::process::exit(iml::cli::cmd_dispatch(std::env::args_os()));
}
