use std::process::ExitCode;

fn main() -> ExitCode {
    ica_reweight::cli::main()
}
