fn main() {
    std::process::exit(mepstab::cli::run(std::env::args_os()));
}
