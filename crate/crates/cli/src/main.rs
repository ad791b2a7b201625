use std::process::ExitCode;

fn main() -> ExitCode {
    latentmoe_cli::cli::main_with(std::env::args_os())
}
