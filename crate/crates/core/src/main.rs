use std::process::ExitCode;

fn main() -> ExitCode {
    match thetafit::cli::run_from(std::env::args_os()) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
