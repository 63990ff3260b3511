use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(bitsplit_core::cli::run(std::env::args()) as u8)
}
