use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xformlab::run::{batch_status, run_batch, run_manifest, validate_manifest, Status};

#[derive(Parser)]
#[command(name = "xformlab", version, about = "Run transmutation and inverse-potential experiments from JSON manifests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one manifest.
    Run { manifest: PathBuf },
    /// Run every `*.json` manifest in a directory; `XFORMLAB_THREADS` caps parallelism.
    Batch { dir: PathBuf },
    /// Parse and validate a manifest without running it.
    Validate { manifest: PathBuf },
}

fn exit(status: Status) -> ExitCode {
    ExitCode::from(status.exit_code() as u8)
}

fn threads() -> Option<usize> {
    std::env::var("XFORMLAB_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { manifest } => {
            let outcome = run_manifest(&manifest);
            if let Some(line) = outcome.reason_line() {
                eprintln!("{line}");
            }
            if let Some(dir) = &outcome.output_dir {
                println!("{:?} {}", outcome.status, dir.join("summary.json").display());
            }
            exit(outcome.status)
        }
        Command::Batch { dir } => match run_batch(&dir, threads()) {
            Ok(outcomes) => {
                for (path, o) in &outcomes {
                    let status = serde_json::to_string(&o.status).unwrap_or_default();
                    println!("{} {}", path.display(), status.trim_matches('"'));
                    if let Some(line) = o.reason_line() {
                        eprintln!("{line}");
                    }
                }
                exit(batch_status(&outcomes))
            }
            Err(e) => {
                eprintln!("{}", serde_json::json!({"status": "validation_error", "reason": e.to_string()}));
                exit(Status::ValidationError)
            }
        },
        Command::Validate { manifest } => match validate_manifest(&manifest) {
            Ok(kind) => {
                println!("ok {}", kind.name());
                exit(Status::Pass)
            }
            Err(e) => {
                eprintln!("{}", serde_json::json!({"status": "validation_error", "field": e.field, "reason": e.message}));
                exit(Status::ValidationError)
            }
        },
    }
}
