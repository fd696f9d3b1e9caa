fn main() {
    std::process::exit(ccnet::cli::run(std::env::args_os()));
}
