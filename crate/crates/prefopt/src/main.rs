use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(prefopt::cli::run() as u8)
}
