use decklander::cli::run_cli;

fn main() {
    env_logger::init();
    std::process::exit(run_cli(std::env::args()));
}
