use std::process::ExitCode;

fn main() -> ExitCode {
    ids_cli::main_with_args(std::env::args_os())
}
