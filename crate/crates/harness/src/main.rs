use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rotrnn_harness::cli::run(std::env::args_os()) as u8)
}
