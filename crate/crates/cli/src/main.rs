fn main() {
    std::process::exit(greensim_cli::run(std::env::args_os()));
}
