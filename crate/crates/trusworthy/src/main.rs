use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(trusworthy::cli::run(std::env::args_os()))
}
