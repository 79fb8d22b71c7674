use std::process::ExitCode;

fn main() -> ExitCode {
    pcvecchia::cli::main_with_args(std::env::args_os())
}
