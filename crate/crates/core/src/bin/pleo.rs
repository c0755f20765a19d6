use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pleo::cli::run(std::env::args()) as u8)
}
