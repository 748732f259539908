use std::process::ExitCode;

fn main() -> ExitCode {
    a3dfdg::cli::main_with_args(std::env::args_os())
}
