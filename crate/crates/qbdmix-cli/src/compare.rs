//! Side-by-side comparison of the RG route, the dense truncated oracle and
//! the Monte Carlo simulator.

use serde::Serialize;

use qbdmix::blocks::BlockMatrixWindow;
use qbdmix::factorization::{rg_residual, solve_level_dependent};
use qbdmix::mixing;
use qbdmix::model::{truncate_dense, BoundaryPolicy, QbdModel};
use qbdmix::oracle::{self, MomentEstimate};
use qbdmix::stationary::stationary_window_to_mass;
use qbdmix::Result;

use crate::report::EtaDto;

#[derive(Serialize)]
pub struct BlockError {
    pub i: usize,
    pub j: usize,
    pub max_rel_err: f64,
}

#[derive(Serialize)]
pub struct WindowComparison {
    pub max_rel_err: f64,
    pub blocks: Vec<BlockError>,
}

#[derive(Serialize)]
pub struct KemenyComparison {
    /// trace(Z) of the censored level-0 chain (the generalized constant).
    pub censored_trace: f64,
    pub censored_2x2: Option<f64>,
    pub censored_2x2_spread: Option<f64>,
    /// Kemeny constant of the dense truncation (finite-chain identity).
    pub dense_trace: f64,
    pub dense_constancy_deviation: f64,
}

#[derive(Serialize)]
pub struct PassageSimComparison {
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub analytic_mean: f64,
    pub analytic_variance: f64,
    pub estimate: MomentEstimate,
    pub mean_within_3hw: bool,
    pub variance_within_3hw: bool,
}

/// The `compare` payload. `eta`/`tau_partial` are windowed partial sums and
/// carry the divergence flag next to the censored constant: for chains where
/// the direct series diverges, both numbers are surfaced side by side.
#[derive(Serialize)]
pub struct ComparePayload {
    pub truncation: usize,
    pub stationary_max_rel_err: f64,
    pub factorization_residual: f64,
    pub m: WindowComparison,
    pub m2: WindowComparison,
    pub kemeny: KemenyComparison,
    pub eta: EtaDto,
    pub simulation: Option<PassageSimComparison>,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-30)
}

fn compare_windows(
    model: &QbdModel,
    w: &BlockMatrixWindow,
    dense: &nalgebra::DMatrix<f64>,
    chain: &qbdmix::model::DenseChain,
) -> WindowComparison {
    let mut blocks = Vec::new();
    let mut overall = 0.0_f64;
    for i in 0..w.row_levels() {
        for j in 0..w.col_levels() {
            let mut worst = 0.0_f64;
            for r in 0..model.phase_size(i) {
                let si = chain.state_index(i, r).unwrap();
                for c in 0..model.phase_size(j) {
                    let sj = chain.state_index(j, c).unwrap();
                    worst = worst.max(rel(w.block(i, j)[(r, c)], dense[(si, sj)]));
                }
            }
            overall = overall.max(worst);
            blocks.push(BlockError {
                i,
                j,
                max_rel_err: worst,
            });
        }
    }
    WindowComparison {
        max_rel_err: overall,
        blocks,
    }
}

pub struct CompareOptions {
    pub window: (usize, usize),
    pub tol: f64,
    pub eps_tail: f64,
    pub truncation: usize,
    pub paths: usize,
    pub seed: u64,
    pub cap: u64,
}

pub fn compare(model: &QbdModel, opt: &CompareOptions) -> Result<ComparePayload> {
    let f = solve_level_dependent(model, opt.tol)?;
    let pi = stationary_window_to_mass(model, &f, opt.window.1, 1e-12)?;
    let chain = truncate_dense(model, opt.truncation, BoundaryPolicy::ReflectToA1)?;

    // Stationary agreement.
    let dense_pi = oracle::dense_stationary(&chain)?;
    let mut pi_err = 0.0_f64;
    for k in 0..=opt.window.1 {
        for ph in 0..model.phase_size(k) {
            let idx = chain.state_index(k, ph).unwrap();
            pi_err = pi_err.max(rel(pi.prob(k, ph), dense_pi[idx]));
        }
    }

    let factorization_residual = rg_residual(model, &f, model.inhomogeneity_bound() + 8)?;

    // Mean and second-moment windows vs the oracle.
    let m = mixing::mean_first_passage(model, &f, &pi, opt.window, opt.eps_tail)?;
    let dense_m = oracle::dense_mfpt(&chain)?;
    let m_cmp = compare_windows(model, &m, &dense_m, &chain);

    let m2 = mixing::second_moment_first_passage(
        model,
        &f,
        &pi,
        opt.window,
        opt.eps_tail,
        opt.truncation,
    )?;
    let n = chain.p.nrows();
    let mut dense_m2 = nalgebra::DMatrix::<f64>::zeros(n, n);
    for j in 0..=opt.window.1 {
        for c in 0..model.phase_size(j) {
            let sj = chain.state_index(j, c).unwrap();
            let (_, col) = oracle::dense_passage_moments(&chain, sj)?;
            for si in 0..n {
                dense_m2[(si, sj)] = col[si];
            }
        }
    }
    let m2_cmp = compare_windows(model, &m2.window, &dense_m2, &chain);

    // Kemeny constants: censored route vs the finite-chain identity.
    let censored_trace = mixing::kemeny_censored(&f);
    let (censored_2x2, spread) = if f.u(0).nrows() >= 2 {
        let sweep = mixing::kemeny_censored_2x2_sweep(&f)?;
        let lo = sweep.iter().map(|s| s.2).fold(f64::MAX, f64::min);
        let hi = sweep.iter().map(|s| s.2).fold(f64::MIN, f64::max);
        (Some(sweep[0].2), Some(hi - lo))
    } else {
        (None, None)
    };
    let dense_k = oracle::dense_kemeny(&chain)?;

    let eta = mixing::eta_vector(&m, &pi);

    // Simulation concordance on the first off-boundary passage.
    let simulation = if opt.paths > 0 {
        let from = (0usize, 0usize);
        let to = (1usize, 0usize);
        let est = oracle::simulate_passage_model(model, from, to, opt.paths, opt.seed, opt.cap)?;
        let mean = m.entry((0, 0), (1, 0));
        let variance = m2.window.entry((0, 0), (1, 0)) - mean * mean;
        Some(PassageSimComparison {
            from,
            to,
            analytic_mean: mean,
            analytic_variance: variance,
            mean_within_3hw: (est.mean - mean).abs() <= 3.0 * est.half_width_95,
            variance_within_3hw: (est.variance - variance).abs()
                <= 3.0 * est.variance_half_width_95,
            estimate: est,
        })
    } else {
        None
    };

    Ok(ComparePayload {
        truncation: opt.truncation,
        stationary_max_rel_err: pi_err,
        factorization_residual,
        m: m_cmp,
        m2: m2_cmp,
        kemeny: KemenyComparison {
            censored_trace,
            censored_2x2,
            censored_2x2_spread: spread,
            dense_trace: dense_k.trace,
            dense_constancy_deviation: dense_k.constancy_deviation,
        },
        eta: EtaDto::from(&eta),
        simulation,
    })
}
