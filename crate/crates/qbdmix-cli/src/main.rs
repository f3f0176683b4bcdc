//! `qbd-mix`: compute R/G/U measures, stationary windows, first-passage and
//! mixing-time moments of a level-dependent QBD, and cross-check them
//! against dense and Monte Carlo oracles.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numeric nonconvergence,
//! 3 usage error. Data goes to stdout, diagnostics to stderr.

mod cli;
mod compare;
mod config;
mod report;

use clap::Parser;

use qbdmix::factorization::{rg_residual, solve_level_dependent};
use qbdmix::mixing;
use qbdmix::model::{truncate_dense, validate, BoundaryPolicy};
use qbdmix::oracle;
use qbdmix::stationary::{stationary_window, stationary_window_to_mass};
use qbdmix::QbdError;

use cli::{Cli, Command, OutputFormat, PinFlag, SimKind};
use config::{resolve, Run};
use report::*;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version pseudo-errors still exit 0.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(3);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };

    if let Ok(threads) = std::env::var("QBD_MIX_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }

    match dispatch(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &QbdError) -> i32 {
    match e {
        QbdError::Validation(_) | QbdError::Parse(_) | QbdError::Dimension { .. } => 1,
        QbdError::Nonconvergence { .. }
        | QbdError::NotPositiveRecurrent { .. }
        | QbdError::Singular { .. }
        | QbdError::Inconsistent { .. }
        | QbdError::StationaryUnderflow { .. }
        | QbdError::CapExceeded { .. }
        | QbdError::Reducible { .. } => 2,
        QbdError::Argument(_) | QbdError::Io(_) => 3,
    }
}

fn csv_unsupported(sub: &str) -> QbdError {
    QbdError::Argument(format!("--format csv is not available for {sub}"))
}

fn dispatch(cli: &Cli) -> qbdmix::Result<()> {
    let name = match &cli.command {
        Command::Validate => "validate",
        Command::Factorize => "factorize",
        Command::Stationary => "stationary",
        Command::Mfpt => "mfpt",
        Command::Mixing => "mixing",
        Command::Variance => "variance",
        Command::Kemeny => "kemeny",
        Command::Simulate { .. } => "simulate",
        Command::Compare => "compare",
    };

    // `validate` reports violations instead of failing on them.
    if matches!(cli.command, Command::Validate) {
        return run_validate(cli);
    }

    let Run { model, config } = resolve(cli, name)?;
    let (i_max, j_max) = (config.window[0], config.window[1]);
    let window = (i_max, j_max);
    let eps = config.eps_tail;

    match &cli.command {
        Command::Validate => unreachable!(),
        Command::Factorize => {
            let f = solve_level_dependent(&model, config.tol)?;
            let payload = FactorizePayload {
                n_star: f.n_star,
                r_blocks: f.r_blocks.iter().map(MatrixDto::from).collect(),
                r_tail: MatrixDto::from(&f.r_tail),
                g_blocks: f.g_blocks.iter().map(MatrixDto::from).collect(),
                g_tail: MatrixDto::from(&f.g_tail),
                u_blocks: f.u_blocks.iter().map(MatrixDto::from).collect(),
                v0: f.v0.iter().copied().collect(),
                z: MatrixDto::from(&f.z),
                tail_spectral_radius: f.tail_spectral_radius,
                tail_iterations: f.tail_iterations,
                reqn_residual: f.reqn_residual,
                geqn_residual: f.geqn_residual,
                rg_factorization_residual: rg_residual(
                    &model,
                    &f,
                    model.inhomogeneity_bound() + 8,
                )?,
            };
            match cli.format {
                OutputFormat::Json => println!("{}", Report::new(config, payload).to_json()),
                OutputFormat::Csv => return Err(csv_unsupported("factorize")),
            }
        }
        Command::Stationary => {
            let f = solve_level_dependent(&model, config.tol)?;
            let w = stationary_window(&model, &f, j_max, eps)?;
            match cli.format {
                OutputFormat::Json => {
                    let payload = StationaryPayload::from(&w, j_max);
                    println!("{}", Report::new(config, payload).to_json());
                }
                OutputFormat::Csv => print!("{}", stationary_to_csv(&w)),
            }
        }
        Command::Mfpt => {
            let f = solve_level_dependent(&model, config.tol)?;
            let pi = stationary_window_to_mass(&model, &f, j_max, 1e-12)?;
            let (m, constants) = match cli.pin {
                PinFlag::DiagonalMfpt => {
                    let solver = mixing::MfptSolver::new(&model, &f, &pi, i_max, j_max, eps)?;
                    let consts = solver
                        .constants()
                        .iter()
                        .map(|c| c.iter().copied().collect())
                        .collect();
                    (solver.window(i_max), consts)
                }
                PinFlag::RawFree => {
                    let rhs = mixing::MfptRhs::new(&model, &pi, j_max)?;
                    let sol = qbdmix::poisson::solve_matrix_poisson(
                        &f,
                        &pi,
                        &rhs,
                        qbdmix::poisson::Pin::RawFree,
                        window,
                        eps,
                    )?;
                    let consts = sol
                        .constants
                        .iter()
                        .map(|c| c.iter().copied().collect())
                        .collect();
                    (sol.particular, consts)
                }
                PinFlag::OracleDiagonal => {
                    return Err(QbdError::Argument(
                        "oracle-diagonal pins the second-moment system; use `variance`".into(),
                    ))
                }
            };
            match cli.format {
                OutputFormat::Json => {
                    let payload = MfptPayload {
                        m: WindowDto::from(&m),
                        pin_policy: config.pin_policy.clone(),
                        constants,
                    };
                    println!("{}", Report::new(config, payload).to_json());
                }
                OutputFormat::Csv => print!("{}", window_to_csv(&m)),
            }
        }
        Command::Mixing => {
            let f = solve_level_dependent(&model, config.tol)?;
            let pi = stationary_window_to_mass(&model, &f, j_max, 1e-12)?;
            let m = mixing::mean_first_passage(&model, &f, &pi, window, eps)?;
            let l = mixing::mean_mixing_matrix(&m, &pi);
            let eta = mixing::eta_vector(&m, &pi);
            let k2 = if f.u(0).nrows() >= 2 {
                Some(mixing::kemeny_censored_2x2(&f, (0, 1))?)
            } else {
                None
            };
            let dual = if cli.dual_route {
                let via = mixing::mean_mixing_matrix_via_poisson(&model, &f, &pi, window, eps)?;
                Some(l.max_diff(&via.particular))
            } else {
                None
            };
            match cli.format {
                OutputFormat::Json => {
                    let payload = MixingPayload {
                        l: WindowDto::from(&l),
                        eta: EtaDto::from(&eta),
                        kemeny_censored: mixing::kemeny_censored(&f),
                        kemeny_censored_2x2: k2,
                        dual_route_max_diff: dual,
                    };
                    println!("{}", Report::new(config, payload).to_json());
                }
                OutputFormat::Csv => print!("{}", window_to_csv(&l)),
            }
        }
        Command::Variance => {
            let f = solve_level_dependent(&model, config.tol)?;
            let pi = stationary_window_to_mass(&model, &f, j_max, 1e-12)?;
            let m = mixing::mean_first_passage(&model, &f, &pi, window, eps)?;
            let m2 = mixing::second_moment_first_passage(
                &model,
                &f,
                &pi,
                window,
                eps,
                config.truncation,
            )?;
            let (l2, var) = mixing::variance_pipeline(&m, &m2.window, &pi);
            let route_diff = if cli.dual_route {
                let via = mixing::eta2_via_vector_route(&model, &f, &pi, window, eps, &m2)?;
                Some(
                    var.eta2_per_state
                        .iter()
                        .zip(&via)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0_f64, f64::max),
                )
            } else {
                None
            };
            match cli.format {
                OutputFormat::Json => {
                    let mut payload = VariancePayload::from(&m2.window, &l2, &var);
                    payload.eta2_route_max_diff = route_diff;
                    println!("{}", Report::new(config, payload).to_json());
                }
                OutputFormat::Csv => print!("{}", window_to_csv(&m2.window)),
            }
        }
        Command::Kemeny => {
            let f = solve_level_dependent(&model, config.tol)?;
            let (k2, sweep, spread) = if f.u(0).nrows() >= 2 {
                let sweep = mixing::kemeny_censored_2x2_sweep(&f)?;
                let lo = sweep.iter().map(|s| s.2).fold(f64::MAX, f64::min);
                let hi = sweep.iter().map(|s| s.2).fold(f64::MIN, f64::max);
                (Some(sweep[0].2), Some(sweep), Some(hi - lo))
            } else {
                (None, None, None)
            };
            let chain = truncate_dense(&model, config.truncation, BoundaryPolicy::ReflectToA1)?;
            let dense = oracle::dense_kemeny(&chain)?;
            let payload = KemenyPayload {
                kemeny_censored: mixing::kemeny_censored(&f),
                kemeny_censored_2x2: k2,
                censored_2x2_sweep: sweep,
                censored_2x2_spread: spread,
                dense_oracle_trace: dense.trace,
                dense_constancy_deviation: dense.constancy_deviation,
            };
            match cli.format {
                OutputFormat::Json => println!("{}", Report::new(config, payload).to_json()),
                OutputFormat::Csv => return Err(csv_unsupported("kemeny")),
            }
        }
        Command::Simulate { kind, from, to } => {
            if config.paths == 0 {
                return Err(QbdError::Argument("--paths must be positive".into()));
            }
            let estimate = match kind {
                SimKind::Passage => oracle::simulate_passage_model(
                    &model,
                    (from[0], from[1]),
                    (to[0], to[1]),
                    config.paths,
                    config.seed,
                    config.cap,
                )?,
                SimKind::Mixing => {
                    let chain =
                        truncate_dense(&model, config.truncation, BoundaryPolicy::ReflectToA1)?;
                    oracle::simulate_mixing(&chain, config.paths, config.seed, config.cap)?
                }
            };
            let payload = SimulatePayload {
                kind: match kind {
                    SimKind::Passage => "passage".into(),
                    SimKind::Mixing => "mixing".into(),
                },
                from: matches!(kind, SimKind::Passage).then(|| (from[0], from[1])),
                to: matches!(kind, SimKind::Passage).then(|| (to[0], to[1])),
                estimate,
            };
            match cli.format {
                OutputFormat::Json => println!("{}", Report::new(config, payload).to_json()),
                OutputFormat::Csv => return Err(csv_unsupported("simulate")),
            }
        }
        Command::Compare => {
            let payload = compare::compare(
                &model,
                &compare::CompareOptions {
                    window,
                    tol: config.tol,
                    eps_tail: eps,
                    truncation: config.truncation,
                    paths: config.paths,
                    seed: config.seed,
                    cap: config.cap,
                },
            )?;
            match cli.format {
                OutputFormat::Json => println!("{}", Report::new(config, payload).to_json()),
                OutputFormat::Csv => return Err(csv_unsupported("compare")),
            }
        }
    }
    Ok(())
}

fn run_validate(cli: &Cli) -> qbdmix::Result<()> {
    // Loading a bad file must still print the embedded report.
    match resolve(cli, "validate") {
        Ok(Run { model, config }) => {
            let report = validate(&model);
            let ok = report.ok;
            let payload = ValidatePayload { report };
            match cli.format {
                OutputFormat::Json => println!("{}", Report::new(config, payload).to_json()),
                OutputFormat::Csv => return Err(csv_unsupported("validate")),
            }
            if !ok {
                std::process::exit(1);
            }
            Ok(())
        }
        Err(QbdError::Validation(report)) => {
            // Parsed but invalid: emit the report and exit 1.
            let out = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "data": { "report": report },
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("report"));
            std::process::exit(1);
        }
        Err(e) => Err(e),
    }
}
