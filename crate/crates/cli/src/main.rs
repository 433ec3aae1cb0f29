use cbf_swarm_cli::{dispatch, Cli, EXIT_USAGE};
use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CBF_SWARM_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version go to stdout and succeed; clap's own exit code
            // for usage errors (2) would collide with the safety code.
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    std::process::exit(dispatch(&cli));
}
