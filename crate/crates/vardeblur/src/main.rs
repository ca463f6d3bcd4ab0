use std::process::ExitCode;

fn main() -> ExitCode {
    vardeblur::cli::run()
}
