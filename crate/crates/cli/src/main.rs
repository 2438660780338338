use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match cleandift_cli::execute(std::env::args().skip(1).collect()) {
        Ok(out) => {
            if let Some(dir) = out.run_dir {
                println!("{}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = cleandift_cli::exit_code(&e);
            if let Some(c) = e.downcast_ref::<clap::Error>() {
                let _ = c.print();
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code as u8)
        }
    }
}
