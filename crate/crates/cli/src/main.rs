use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(sftmn_cli::run(std::env::args_os()))
}
