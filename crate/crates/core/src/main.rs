use std::process::ExitCode;

fn main() -> ExitCode {
    meanode::cli::main_from_args(std::env::args_os())
}
