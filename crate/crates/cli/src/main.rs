fn main() {
    std::process::exit(ssmecg_cli::dispatch(std::env::args_os()));
}
