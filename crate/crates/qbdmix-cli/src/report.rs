//! Serializable report envelope and window DTOs.

use nalgebra::DMatrix;
use serde::Serialize;

use qbdmix::blocks::BlockMatrixWindow;
use qbdmix::mixing::{EtaVector, VariancePipeline};
use qbdmix::model::ValidationReport;
use qbdmix::oracle::MomentEstimate;
use qbdmix::stationary::StationaryWindow;

use crate::config::ResolvedConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Envelope every subcommand emits: schema tag, resolved config, payload.
#[derive(Serialize)]
pub struct Report<T: Serialize> {
    pub schema_version: u32,
    pub config: ResolvedConfig,
    pub data: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(config: ResolvedConfig, data: T) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            config,
            data,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

#[derive(Serialize)]
pub struct MatrixDto {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<Vec<f64>>,
}

impl MatrixDto {
    pub fn from(m: &DMatrix<f64>) -> Self {
        MatrixDto {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
                .collect(),
        }
    }
}

#[derive(Serialize)]
pub struct BlockDto {
    pub i: usize,
    pub j: usize,
    /// Row-major block entries.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Serialize)]
pub struct WindowDto {
    pub row_levels: usize,
    pub col_levels: usize,
    pub horizon: usize,
    pub horizon_tail_norm: f64,
    pub blocks: Vec<BlockDto>,
}

impl WindowDto {
    pub fn from(w: &BlockMatrixWindow) -> Self {
        let mut blocks = Vec::new();
        for i in 0..w.row_levels() {
            for j in 0..w.col_levels() {
                let b = w.block(i, j);
                blocks.push(BlockDto {
                    i,
                    j,
                    rows: (0..b.nrows())
                        .map(|r| (0..b.ncols()).map(|c| b[(r, c)]).collect())
                        .collect(),
                });
            }
        }
        WindowDto {
            row_levels: w.row_levels(),
            col_levels: w.col_levels(),
            horizon: w.horizon,
            horizon_tail_norm: w.horizon_tail_norm,
            blocks,
        }
    }
}

/// Row-major CSV of a window: `level_i,phase_i,level_j,phase_j,value`.
pub fn window_to_csv(w: &BlockMatrixWindow) -> String {
    let mut out = String::from("level_i,phase_i,level_j,phase_j,value\n");
    for i in 0..w.row_levels() {
        for r in 0..w.row_sizes[i] {
            for j in 0..w.col_levels() {
                let b = w.block(i, j);
                for c in 0..b.ncols() {
                    out.push_str(&format!("{i},{r},{j},{c},{}\n", b[(r, c)]));
                }
            }
        }
    }
    out
}

/// CSV of a stationary window: `level,phase,value`.
pub fn stationary_to_csv(w: &StationaryWindow) -> String {
    let mut out = String::from("level,phase,value\n");
    for (k, pi) in w.pi_blocks.iter().enumerate() {
        for (ph, &x) in pi.iter().enumerate() {
            out.push_str(&format!("{k},{ph},{x}\n"));
        }
    }
    out
}

// -- per-subcommand payloads -------------------------------------------------

#[derive(Serialize)]
pub struct ValidatePayload {
    pub report: ValidationReport,
}

#[derive(Serialize)]
pub struct FactorizePayload {
    pub n_star: usize,
    pub r_blocks: Vec<MatrixDto>,
    pub r_tail: MatrixDto,
    pub g_blocks: Vec<MatrixDto>,
    pub g_tail: MatrixDto,
    pub u_blocks: Vec<MatrixDto>,
    pub v0: Vec<f64>,
    pub z: MatrixDto,
    pub tail_spectral_radius: f64,
    pub tail_iterations: usize,
    pub reqn_residual: f64,
    pub geqn_residual: f64,
    pub rg_factorization_residual: f64,
}

#[derive(Serialize)]
pub struct StationaryPayload {
    pub phi: f64,
    pub v0: Vec<f64>,
    pub pi: Vec<Vec<f64>>,
    pub tail_mass_bound: f64,
    pub window_mass: f64,
}

impl StationaryPayload {
    pub fn from(w: &StationaryWindow, j_max: usize) -> Self {
        StationaryPayload {
            phi: w.phi,
            v0: w.v0.iter().copied().collect(),
            pi: w
                .pi_blocks
                .iter()
                .take(j_max + 1)
                .map(|p| p.iter().copied().collect())
                .collect(),
            tail_mass_bound: w.tail_mass_bound,
            window_mass: w.window_mass(),
        }
    }
}

#[derive(Serialize)]
pub struct MfptPayload {
    pub m: WindowDto,
    pub pin_policy: String,
    pub constants: Vec<Vec<f64>>,
}

#[derive(Serialize)]
pub struct EtaDto {
    pub per_state: Vec<f64>,
    pub tau_partial: f64,
    pub last_growth: f64,
    pub divergence_flag: bool,
}

impl EtaDto {
    pub fn from(e: &EtaVector) -> Self {
        EtaDto {
            per_state: e.per_state.clone(),
            tau_partial: e.tau_partial,
            last_growth: e.last_growth,
            divergence_flag: e.divergence_flag,
        }
    }
}

#[derive(Serialize)]
pub struct MixingPayload {
    pub l: WindowDto,
    pub eta: EtaDto,
    pub kemeny_censored: f64,
    pub kemeny_censored_2x2: Option<f64>,
    /// Max deviation between `M diag(pi)` and the independent
    /// `(I - P) L = e pi - P` solve (present under --dual-route).
    pub dual_route_max_diff: Option<f64>,
}

#[derive(Serialize)]
pub struct VariancePayload {
    pub m2: WindowDto,
    pub l2: WindowDto,
    pub eta2_per_state: Vec<f64>,
    pub v2_per_state: Vec<f64>,
    pub v2_stationary: f64,
    pub divergence_flag: bool,
    /// Max deviation of the eta2 vector route from `M^(2) pi^T` (present
    /// under --dual-route).
    pub eta2_route_max_diff: Option<f64>,
}

impl VariancePayload {
    pub fn from(m2: &BlockMatrixWindow, l2: &BlockMatrixWindow, v: &VariancePipeline) -> Self {
        VariancePayload {
            m2: WindowDto::from(m2),
            l2: WindowDto::from(l2),
            eta2_per_state: v.eta2_per_state.clone(),
            v2_per_state: v.v2_per_state.clone(),
            v2_stationary: v.v2_stationary,
            divergence_flag: v.divergence_flag,
            eta2_route_max_diff: None,
        }
    }
}

#[derive(Serialize)]
pub struct KemenyPayload {
    pub kemeny_censored: f64,
    pub kemeny_censored_2x2: Option<f64>,
    /// `(i, j, value)` over all kept pairs; equality across pairs is
    /// reported, never assumed.
    pub censored_2x2_sweep: Option<Vec<(usize, usize, f64)>>,
    pub censored_2x2_spread: Option<f64>,
    pub dense_oracle_trace: f64,
    pub dense_constancy_deviation: f64,
}

#[derive(Serialize)]
pub struct SimulatePayload {
    pub kind: String,
    pub from: Option<(usize, usize)>,
    pub to: Option<(usize, usize)>,
    pub estimate: MomentEstimate,
}
