use std::process::ExitCode;

fn main() -> ExitCode {
    hyperbolic_aap::cli::main_with_args(std::env::args_os())
}
