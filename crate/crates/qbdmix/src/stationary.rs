//! Stationary distribution of the QBD through the censored chain:
//! `pi_0 = phi v_0`, `pi_k = phi v_0 R_0 R_1 ... R_{k-1}`, with the
//! normalization `phi = 1 / (1 + sum_k v_0 R_0 ... R_k e)`.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{QbdError, Result};
use crate::factorization::{RgFactorization, SERIES_CAP};
use crate::linalg;
use crate::model::QbdModel;

/// Stationary probabilities below this make `diag(pi)^{-1}` unusable.
pub const PI_FLOOR: f64 = 1e-14;

/// A window `pi_0 .. pi_J` of the stationary distribution plus an upper
/// bound on the probability mass beyond the window.
#[derive(Debug, Clone)]
pub struct StationaryWindow {
    /// Stationary row vector of the censored chain `U_0`.
    pub v0: RowDVector<f64>,
    /// Normalization constant.
    pub phi: f64,
    /// `pi_0 .. pi_J`.
    pub pi_blocks: Vec<RowDVector<f64>>,
    /// Geometric-majorant bound on `sum_{k > J} pi_k e`, using `sp(tail R)`
    /// as the decay rate.
    pub tail_mass_bound: f64,
    /// `sp(tail R)` used for the bound.
    pub tail_spectral_radius: f64,
}

impl StationaryWindow {
    /// Last window level `J`.
    pub fn max_level(&self) -> usize {
        self.pi_blocks.len() - 1
    }

    /// `pi_k` as a row vector; panics past the window.
    pub fn pi(&self, level: usize) -> &RowDVector<f64> {
        &self.pi_blocks[level]
    }

    /// Single stationary probability `pi_{k,j}`.
    pub fn prob(&self, level: usize, phase: usize) -> f64 {
        self.pi_blocks[level][phase]
    }

    /// Probability mass inside the window.
    pub fn window_mass(&self) -> f64 {
        self.pi_blocks.iter().map(|p| p.sum()).sum()
    }

    /// `diag(pi_k)^{-1}` as a dense block; errors on underflow instead of
    /// dividing by ~0.
    pub fn diag_pi_inverse(&self, level: usize) -> Result<DMatrix<f64>> {
        let pi = &self.pi_blocks[level];
        let mut d = DMatrix::<f64>::zeros(pi.len(), pi.len());
        for j in 0..pi.len() {
            if pi[j] < PI_FLOOR {
                return Err(QbdError::StationaryUnderflow {
                    level,
                    phase: j,
                    value: pi[j],
                });
            }
            d[(j, j)] = 1.0 / pi[j];
        }
        Ok(d)
    }
}

/// Unique probability row vector `v_0` with `v_0 (I - U_0) = 0`.
pub fn censored_stationary(u0: &DMatrix<f64>) -> Result<RowDVector<f64>> {
    if !linalg::strongly_connected(u0) {
        return Err(QbdError::Reducible {
            context: "censored chain U0".into(),
        });
    }
    linalg::stationary_row(u0, "censored stationary vector")
}

/// Compute `phi` and the window `pi_0 .. pi_J`.
///
/// The normalization series is truncated once its running term drops below
/// `eps_tail`; the skipped mass is covered by a geometric majorant at rate
/// `sp(tail R)` and folded into `tail_mass_bound` accounting.
pub fn stationary_window(
    model: &QbdModel,
    f: &RgFactorization,
    j_max: usize,
    eps_tail: f64,
) -> Result<StationaryWindow> {
    let _ = model; // the window is fully determined by the factorization
    let sp = f.tail_spectral_radius;
    if sp >= 1.0 {
        return Err(QbdError::NotPositiveRecurrent {
            spectral_radius: sp,
        });
    }

    // phi = 1 / (1 + sum_{k>=0} v0 R_0...R_k e), term k has k+1 factors.
    let mut series = 0.0_f64;
    let mut prod = f.v0.clone(); // v0 X_k^{(0)} as a running row vector
    let mut k = 0usize;
    let term_of = |row: &RowDVector<f64>| row.sum();
    loop {
        prod = &prod * f.r(k);
        let term = term_of(&prod);
        series += term;
        if term < eps_tail {
            break;
        }
        k += 1;
        if k >= SERIES_CAP {
            return Err(QbdError::Nonconvergence {
                what: "stationary normalization series".into(),
                iterations: SERIES_CAP,
                residual: term,
            });
        }
    }
    let phi = 1.0 / (1.0 + series);

    let mut pi_blocks = Vec::with_capacity(j_max + 1);
    pi_blocks.push(phi * f.v0.clone());
    let mut prod = f.v0.clone();
    for level in 1..=j_max {
        prod = &prod * f.r(level - 1);
        pi_blocks.push(phi * prod.clone());
    }

    let last_mass = pi_blocks[j_max].sum();
    let tail_mass_bound = last_mass * sp / (1.0 - sp);

    Ok(StationaryWindow {
        v0: f.v0.clone(),
        phi,
        pi_blocks,
        tail_mass_bound,
        tail_spectral_radius: sp,
    })
}

/// Extend the window until `tail_mass_bound <= target` (and at least
/// `min_levels` levels), so downstream series over levels can be truncated
/// against it.
pub fn stationary_window_to_mass(
    model: &QbdModel,
    f: &RgFactorization,
    min_levels: usize,
    target: f64,
) -> Result<StationaryWindow> {
    let mut j = min_levels.max(model.inhomogeneity_bound() + 2);
    loop {
        let w = stationary_window(model, f, j, 1e-16)?;
        if w.tail_mass_bound <= target {
            return Ok(w);
        }
        if j >= SERIES_CAP {
            return Err(QbdError::Nonconvergence {
                what: "stationary window extension".into(),
                iterations: j,
                residual: w.tail_mass_bound,
            });
        }
        j *= 2;
    }
}

/// `e` column of length matching phase size at `level`.
pub fn ones(model: &QbdModel, level: usize) -> DVector<f64> {
    DVector::repeat(model.phase_size(level), 1.0)
}
