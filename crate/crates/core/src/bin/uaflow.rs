use std::process::ExitCode;

fn main() -> ExitCode {
    uaflow::cli::main()
}
