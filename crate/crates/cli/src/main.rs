fn main() {
    std::process::exit(actor_reasoner_cli::run_cli(std::env::args_os()));
}
