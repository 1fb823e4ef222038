fn main() {
    std::process::exit(aslkv::cli::run_experiment(std::env::args_os()));
}
