use std::process::ExitCode;

use flowtrack_cli::Status;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match flowtrack_cli::run(std::env::args_os()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            // Help and version requests come back as clap errors.
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return ExitCode::from(if clap_err.use_stderr() { 2 } else { 0 });
            }
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
