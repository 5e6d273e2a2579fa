mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;
use config::RunConfig;
use error::{CliError, CliResult};

fn dispatch(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let ctx = Ctx { json: cli.json, config: RunConfig::load(cli.config.as_deref())? };
    match cli.command {
        Command::ValidateBundle(a) => commands::validate_bundle(&ctx, a),
        Command::FitAligner(a) => commands::fit_aligner(&ctx, a),
        Command::Heatmap(a) => commands::heatmap(&ctx, a),
        Command::Diff(a) => commands::diff(&ctx, a),
        Command::Binarize(a) => commands::binarize_cmd(&ctx, a),
        Command::Localize(a) => commands::localize(&ctx, a),
        Command::Robustness(a) => commands::robustness(&ctx, a),
        Command::MutateValidate(a) => commands::mutate_validate(&ctx, a),
        Command::Attack(a) => commands::attack(&ctx, a),
        Command::BuildProfile(a) => commands::build_profile(&ctx, a),
        Command::Detect(a) => commands::detect_cmd(&ctx, a),
        Command::EvaluateDetector(a) => commands::evaluate_detector(&ctx, a),
        Command::Workbench(a) => commands::workbench(&ctx, a),
        Command::Render(a) => commands::render(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                let v = serde_json::json!({ "schema": "semheat.error/1", "code": e.code(), "message": e.to_string() });
                eprintln!("{v}");
            } else {
                eprintln!("error[{}]: {e}", e.code());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
