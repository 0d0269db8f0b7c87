use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    match xplain::run(std::env::args_os()) {
        Ok(out) => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout(), "{}", out.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "xplain: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
