use std::process::ExitCode;

fn main() -> ExitCode {
    bnblind_cli::run(std::env::args_os())
}
