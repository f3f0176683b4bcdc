//! Command-line definition.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PinFlag {
    DiagonalMfpt,
    OracleDiagonal,
    RawFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimKind {
    Passage,
    Mixing,
}

/// Matrix-analytic mixing times for level-dependent QBD chains.
#[derive(Debug, Parser)]
#[command(name = "qbd-mix", version, about)]
pub struct Cli {
    /// Model file (JSON schema; see README).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    /// Built-in model: bd (needs --p, --q), two_phase (needs --rho),
    /// random (needs --levels, --phases; uses --seed).
    #[arg(long, global = true)]
    pub builtin: Option<String>,

    /// Upward probability for --builtin bd.
    #[arg(long, global = true)]
    pub p: Option<f64>,

    /// Downward probability for --builtin bd.
    #[arg(long, global = true)]
    pub q: Option<f64>,

    /// Load parameter for --builtin two_phase (must be < 1).
    #[arg(long, global = true)]
    pub rho: Option<f64>,

    /// Inhomogeneous prefix length for --builtin random.
    #[arg(long, global = true)]
    pub levels: Option<usize>,

    /// Max phases per level for --builtin random.
    #[arg(long, global = true)]
    pub phases: Option<usize>,

    /// Window (I_max, J_max) of block rows and columns.
    #[arg(long, global = true, num_args = 2, default_values_t = [8usize, 8usize])]
    pub window: Vec<usize>,

    /// Fixed-point convergence tolerance.
    #[arg(long, global = true, default_value_t = 1e-12)]
    pub tol: f64,

    /// Tail-series truncation threshold.
    #[arg(long = "eps-tail", global = true, default_value_t = 1e-12)]
    pub eps_tail: f64,

    /// Free-constant pin policy for the mean system.
    #[arg(long, global = true, value_enum, default_value_t = PinFlag::DiagonalMfpt)]
    pub pin: PinFlag,

    /// Output format (data to stdout, diagnostics to stderr).
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,

    /// RNG seed (simulation streams and the random builtin).
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,

    /// Number of simulated paths.
    #[arg(long, global = true, default_value_t = 100_000)]
    pub paths: usize,

    /// Per-path step cap.
    #[arg(long, global = true, default_value_t = 10_000_000)]
    pub cap: u64,

    /// Dense-oracle truncation level (default J_max + 25).
    #[arg(long, global = true)]
    pub truncation: Option<usize>,

    /// Also run the independent solve route (mixing: e pi - P through the
    /// generic engine; variance: the vector route for eta2) and report the
    /// agreement.
    #[arg(long = "dual-route", global = true, default_value_t = false)]
    pub dual_route: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check stochasticity, block support and irreducibility.
    Validate,
    /// Compute the R-, G-, U-measures, v0, Z and residuals.
    Factorize,
    /// Stationary window: phi, pi_0..pi_J and the tail mass bound.
    Stationary,
    /// Mean first-passage window M.
    Mfpt,
    /// Mixing matrix L, eta partials, tau and Kemeny constants.
    Mixing,
    /// Second moments M2, L2, eta2, V2 and the stationary variance partial.
    Variance,
    /// Censored Kemeny constants (trace of Z, 2x2 censoring sweep).
    Kemeny,
    /// Monte Carlo estimate of a first-passage or mixing time.
    Simulate {
        /// What to simulate.
        #[arg(long, value_enum, default_value_t = SimKind::Passage)]
        kind: SimKind,
        /// Start state as LEVEL PHASE (passage only).
        #[arg(long, num_args = 2, default_values_t = [0usize, 0usize])]
        from: Vec<usize>,
        /// Target state as LEVEL PHASE (passage only).
        #[arg(long, num_args = 2, default_values_t = [1usize, 0usize])]
        to: Vec<usize>,
    },
    /// Side-by-side RG route vs dense oracle vs simulation.
    Compare,
}
