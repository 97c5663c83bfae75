use std::process::ExitCode;

fn main() -> ExitCode {
    donorsim::cli::run(std::env::args_os())
}
