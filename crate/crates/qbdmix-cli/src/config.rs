//! Resolved run configuration echoed into every report.

use std::collections::BTreeMap;

use serde::Serialize;

use qbdmix::model::{builtin_model, load_model, QbdModel};
use qbdmix::{QbdError, Result};

use crate::cli::{Cli, OutputFormat};

/// Fully resolved configuration, serialized verbatim into the report so runs
/// are reproducible from their output alone.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub model: String,
    pub window: [usize; 2],
    pub tol: f64,
    pub eps_tail: f64,
    pub pin_policy: String,
    pub output_format: String,
    pub seed: u64,
    pub paths: usize,
    pub cap: u64,
    pub truncation: usize,
    pub subcommand: String,
}

pub struct Run {
    pub model: QbdModel,
    pub config: ResolvedConfig,
}

/// Load the model (file or builtin) and freeze the effective options.
pub fn resolve(cli: &Cli, subcommand: &str) -> Result<Run> {
    let (model, label) = match (&cli.model, &cli.builtin) {
        (Some(path), None) => {
            let model = load_model(path)?;
            (model, path.display().to_string())
        }
        (None, Some(name)) => {
            let mut params = BTreeMap::new();
            if let Some(p) = cli.p {
                params.insert("p".to_string(), p);
            }
            if let Some(q) = cli.q {
                params.insert("q".to_string(), q);
            }
            if let Some(rho) = cli.rho {
                params.insert("rho".to_string(), rho);
            }
            if let Some(levels) = cli.levels {
                params.insert("levels".to_string(), levels as f64);
            }
            if let Some(phases) = cli.phases {
                params.insert("phases".to_string(), phases as f64);
            }
            params.insert("seed".to_string(), cli.seed as f64);
            let model = builtin_model(name, &params)?;
            (model, format!("builtin:{name}"))
        }
        _ => {
            return Err(QbdError::Argument(
                "exactly one of --model and --builtin is required".into(),
            ))
        }
    };

    let window = [cli.window[0], cli.window[1]];
    if !(cli.tol > 0.0 && cli.tol < 1.0) || !(cli.eps_tail > 0.0 && cli.eps_tail < 1.0) {
        return Err(QbdError::Argument(
            "tol and eps-tail must lie in (0, 1)".into(),
        ));
    }
    let truncation = cli.truncation.unwrap_or(window[1] + 25);
    Ok(Run {
        model,
        config: ResolvedConfig {
            model: label,
            window,
            tol: cli.tol,
            eps_tail: cli.eps_tail,
            pin_policy: format!("{:?}", cli.pin),
            output_format: match cli.format {
                OutputFormat::Json => "json".to_string(),
                OutputFormat::Csv => "csv".to_string(),
            },
            seed: cli.seed,
            paths: cli.paths,
            cap: cli.cap,
            truncation,
            subcommand: subcommand.to_string(),
        },
    })
}
