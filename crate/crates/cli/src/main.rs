use std::process::ExitCode;

fn main() -> ExitCode {
    match flforge::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(flforge::CliError::Config(msg)) if msg.starts_with("error:") || msg.contains("Usage:") => {
            eprint!("{msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
