fn main() {
    std::process::exit(idnanet::cli::run(std::env::args_os()));
}
