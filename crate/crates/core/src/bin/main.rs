fn main() {
    std::process::exit(gae_distill::cli::run(std::env::args_os()));
}
