use std::process::ExitCode;

fn main() -> ExitCode {
    match anoncodec_cli::run_from_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
