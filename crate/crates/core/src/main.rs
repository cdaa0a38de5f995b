use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(apt_repair::cli::run(std::env::args_os()) as u8)
}
