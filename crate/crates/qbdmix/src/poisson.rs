//! Poisson equations through the factorization.
//!
//! The censored equation `(I - U_0) x = g` is singular with a one-dimensional
//! freedom per column; it is solved through the fundamental matrix `Z` (or
//! any generalized inverse, kept for route cross-checks). The block matrix
//! equation `(I - P) A = B` with `pi B = 0` goes through the factorization:
//!
//! ```text
//! C   = (I - R_U)^{-1} B          (windowed series)
//! X_0 = Z C_0 + e c_0             (censored level; c_0 free)
//! X_k = (I - U_k)^{-1} C_k        (k >= 1)
//! A   = (I - G_L)^{-1} X          (forward substitution)
//! ```
//!
//! The free row vector `c_0` shifts every column of `A` by a constant; pin
//! policies fix it by prescribing the diagonal of the solution window.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockMatrixWindow, BlockRows};
use crate::error::{QbdError, Result};
use crate::factorization::RgFactorization;
use crate::linalg;
use crate::stationary::StationaryWindow;

/// Solvability tolerance for `v_0 g = 0` (relative to the right side's size).
pub const CONSISTENCY_TOL: f64 = 1e-9;

/// Window spot-check tolerance for `pi B = 0`.
pub const PI_B_TOL: f64 = 1e-6;

/// The four vectors of the generalized inverse
/// `V = [I - U_0 + t u]^{-1} + e f + h v_0`.
#[derive(Debug, Clone)]
pub struct GeneralizedInverseSpec {
    pub t: DVector<f64>,
    pub u: RowDVector<f64>,
    pub f: RowDVector<f64>,
    pub h: DVector<f64>,
}

impl GeneralizedInverseSpec {
    /// Validate `v_0 t != 0` and `u e != 0` (tolerance 1e-12).
    pub fn new(
        t: DVector<f64>,
        u: RowDVector<f64>,
        f: RowDVector<f64>,
        h: DVector<f64>,
        v0: &RowDVector<f64>,
    ) -> Result<Self> {
        let v0t = (v0 * &t)[0];
        if v0t.abs() <= 1e-12 {
            return Err(QbdError::Argument(format!(
                "generalized inverse needs v0 t != 0 (got {v0t:.3e})"
            )));
        }
        let ue: f64 = u.iter().sum();
        if ue.abs() <= 1e-12 {
            return Err(QbdError::Argument(format!(
                "generalized inverse needs u e != 0 (got {ue:.3e})"
            )));
        }
        Ok(GeneralizedInverseSpec { t, u, f, h })
    }

    /// The fundamental-matrix choice `t = e`, `u = v_0`, `f = 0`, `h = 0`.
    pub fn fundamental(v0: &RowDVector<f64>) -> Self {
        let m = v0.len();
        GeneralizedInverseSpec {
            t: DVector::repeat(m, 1.0),
            u: v0.clone(),
            f: RowDVector::zeros(m),
            h: DVector::zeros(m),
        }
    }
}

/// `V = [I - U_0 + t u]^{-1} + e f + h v_0`, a generalized inverse of
/// `I - U_0`.
pub fn generalized_inverse(
    u0: &DMatrix<f64>,
    v0: &RowDVector<f64>,
    spec: &GeneralizedInverseSpec,
) -> Result<DMatrix<f64>> {
    let m = u0.nrows();
    let core = linalg::inverse(
        &(DMatrix::identity(m, m) - u0 + &spec.t * &spec.u),
        "generalized inverse (I - U0 + t u)",
    )?;
    let e = DVector::<f64>::repeat(m, 1.0);
    Ok(core + &e * &spec.f + &spec.h * v0)
}

/// Particular solution of the censored matrix Poisson equation
/// `(I - U_0) X = G`, plus the count of free per-column constants.
#[derive(Debug, Clone)]
pub struct CensoredSolution {
    /// `X_0 = Z G`; the general solution is `X_0 + e c` for any row `c`.
    pub particular: DMatrix<f64>,
    /// One free constant per column.
    pub free_parameters: usize,
}

/// Solve `(I - U_0) X = G` through `Z`, enforcing the solvability condition
/// `v_0 G = 0` columnwise.
pub fn solve_censored(u0: &DMatrix<f64>, g0: &DMatrix<f64>) -> Result<CensoredSolution> {
    let v0 = crate::stationary::censored_stationary(u0)?;
    let m = u0.nrows();
    let e = DVector::<f64>::repeat(m, 1.0);
    let z = linalg::inverse(
        &(DMatrix::identity(m, m) - u0 + &e * &v0),
        "fundamental matrix",
    )?;
    solve_censored_with(&z, &v0, g0)
}

/// Same as [`solve_censored`] with `Z` and `v_0` precomputed.
pub fn solve_censored_with(
    z: &DMatrix<f64>,
    v0: &RowDVector<f64>,
    g0: &DMatrix<f64>,
) -> Result<CensoredSolution> {
    let resid = v0 * g0;
    let max_violation = resid.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let scale = 1.0 + linalg::max_norm(g0);
    if max_violation > CONSISTENCY_TOL * scale {
        return Err(QbdError::Inconsistent { max_violation });
    }
    Ok(CensoredSolution {
        particular: z * g0,
        free_parameters: g0.ncols(),
    })
}

/// Solution route through an arbitrary generalized inverse
/// (`x = V g + [I - V (I - U_0)] Theta` with `Theta = 0`); used to check
/// that every route differs from the `Z` route by per-column constants only.
pub fn solve_censored_via_inverse(
    u0: &DMatrix<f64>,
    v0: &RowDVector<f64>,
    spec: &GeneralizedInverseSpec,
    g0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let v = generalized_inverse(u0, v0, spec)?;
    Ok(&v * g0)
}

/// Which rule fixed the free constants of a [`PoissonSolution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinPolicy {
    /// Diagonal forced to the mean return times `1 / pi_{k,j}`.
    DiagonalMfpt,
    /// Diagonal matched to an independent dense absorbing-chain solve.
    OracleDiagonal,
    /// Constants left at zero (particular solution).
    RawFree,
}

/// How to determine the free constants.
#[derive(Debug, Clone)]
pub enum Pin {
    /// Keep `c_0 = 0`.
    RawFree,
    /// Use the given `c_0` row per column level.
    Explicit(Vec<RowDVector<f64>>),
    /// Force the window diagonal to the given values (one vector per column
    /// level); requires the row window to cover every column level.
    Diagonal {
        targets: Vec<DVector<f64>>,
        policy: PinPolicy,
    },
}

/// Solution of `(I - P) A = B` on a window.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    /// The `A` window.
    pub particular: BlockMatrixWindow,
    /// Resolved `c_0` per column level (zero rows under `RawFree`).
    pub constants: Vec<RowDVector<f64>>,
    pub pin_policy: PinPolicy,
}

/// Solve `(I - P) A = B` over `window = (I_max, J_max)`.
///
/// `pi` must reach deep enough that the windowed `pi B` spot-check is
/// meaningful; the infinite-sum tail beyond the `pi` window is what the
/// `1e-6` slack absorbs.
pub fn solve_matrix_poisson(
    f: &RgFactorization,
    pi: &StationaryWindow,
    b: &dyn BlockRows,
    pin: Pin,
    window: (usize, usize),
    eps_tail: f64,
) -> Result<PoissonSolution> {
    check_pi_b(pi, b, window.1)?;
    let c = f.apply_ru_inverse(b, window.0 + 1, window.1 + 1, eps_tail)?;
    solve_matrix_poisson_from_c(f, &c, pin)
}

/// Spot-check `pi B = 0` columnwise over the rows the `pi` window covers.
fn check_pi_b(pi: &StationaryWindow, b: &dyn BlockRows, j_max: usize) -> Result<()> {
    let depth = pi.max_level();
    let mut worst = 0.0_f64;
    let mut scale = 1.0_f64;
    for j in 0..=j_max {
        let mut acc = RowDVector::<f64>::zeros(b.block(0, j).ncols());
        for i in 0..=depth {
            acc += pi.pi(i) * b.block(i, j);
            scale = scale.max(b.row_norm_bound(i));
        }
        worst = worst.max(acc.iter().fold(0.0_f64, |a, x| a.max(x.abs())));
    }
    if worst > PI_B_TOL * scale {
        return Err(QbdError::Inconsistent {
            max_violation: worst,
        });
    }
    Ok(())
}

/// Finish the solve from an already-transformed right side
/// `C = (I - R_U)^{-1} B`.
pub fn solve_matrix_poisson_from_c(
    f: &RgFactorization,
    c: &BlockMatrixWindow,
    pin: Pin,
) -> Result<PoissonSolution> {
    let rows = c.row_levels();
    let cols = c.col_levels();

    // Censored level 0, then the invertible diagonal levels.
    let mut x = c.clone();
    let c0 = assemble_row(c, 0);
    let censored = solve_censored_with(&f.z, &f.v0, &c0)?;
    scatter_row(&mut x, 0, &censored.particular);
    for k in 1..rows {
        let mk = f.phase_size(k);
        let ck = assemble_row(c, k);
        let xk = linalg::solve(
            &(DMatrix::identity(mk, mk) - f.u(k)),
            &ck,
            &format!("(I - U_{k}) solve"),
        )?;
        scatter_row(&mut x, k, &xk);
    }

    let mut a = f.apply_gl_inverse(&x);

    // Y_i^{(i)} e per row level: how a unit constant at level 0 propagates.
    let mut shift_dirs = Vec::with_capacity(rows);
    shift_dirs.push(DVector::<f64>::repeat(f.phase_size(0), 1.0));
    for i in 1..rows {
        let prev = shift_dirs[i - 1].clone();
        shift_dirs.push(f.g(i) * prev);
    }

    let (constants, policy) = match pin {
        Pin::RawFree => (
            (0..cols)
                .map(|j| RowDVector::zeros(f.phase_size(j)))
                .collect(),
            PinPolicy::RawFree,
        ),
        Pin::Explicit(c0s) => {
            if c0s.len() != cols {
                return Err(QbdError::Argument(format!(
                    "expected {} c0 rows, got {}",
                    cols,
                    c0s.len()
                )));
            }
            (c0s, PinPolicy::RawFree)
        }
        Pin::Diagonal { targets, policy } => {
            if targets.len() != cols {
                return Err(QbdError::Argument(format!(
                    "expected {} diagonal targets, got {}",
                    cols,
                    targets.len()
                )));
            }
            if cols > rows {
                return Err(QbdError::Argument(
                    "diagonal pinning needs the row window to cover every column level".into(),
                ));
            }
            let mut consts = Vec::with_capacity(cols);
            for (j, target) in targets.iter().enumerate() {
                let mj = f.phase_size(j);
                let mut delta = RowDVector::<f64>::zeros(mj);
                for ph in 0..mj {
                    let current = a.blocks[j][j][(ph, ph)];
                    let dir = shift_dirs[j][ph];
                    delta[ph] = (target[ph] - current) / dir;
                }
                consts.push(delta);
            }
            (consts, policy)
        }
    };

    // Apply e c_0 through (I - G_L)^{-1}: row i picks up Y_i^{(i)} e c_0.
    for i in 0..rows {
        for (j, c0j) in constants.iter().enumerate() {
            let block = &mut a.blocks[i][j];
            for r in 0..block.nrows() {
                for cc in 0..block.ncols() {
                    block[(r, cc)] += shift_dirs[i][r] * c0j[cc];
                }
            }
        }
    }

    Ok(PoissonSolution {
        particular: a,
        constants,
        pin_policy: policy,
    })
}

fn assemble_row(w: &BlockMatrixWindow, i: usize) -> DMatrix<f64> {
    let rows = w.row_sizes[i];
    let cols: usize = w.col_sizes.iter().sum();
    let mut out = DMatrix::<f64>::zeros(rows, cols);
    let mut off = 0;
    for j in 0..w.col_levels() {
        let b = &w.blocks[i][j];
        for r in 0..b.nrows() {
            for c in 0..b.ncols() {
                out[(r, off + c)] = b[(r, c)];
            }
        }
        off += w.col_sizes[j];
    }
    out
}

fn scatter_row(w: &mut BlockMatrixWindow, i: usize, row: &DMatrix<f64>) {
    let mut off = 0;
    for j in 0..w.col_levels() {
        let cs = w.col_sizes[j];
        for r in 0..row.nrows() {
            for c in 0..cs {
                w.blocks[i][j][(r, c)] = row[(r, off + c)];
            }
        }
        off += cs;
    }
}

/// Max-norm of `(I - P) A - B` over block rows `0..I_max-1` (the last row is
/// horizon-contaminated and excluded), columns `0..=J_max`.
pub fn poisson_residual(
    model: &crate::model::QbdModel,
    a: &BlockMatrixWindow,
    b: &dyn BlockRows,
) -> f64 {
    let rows = a.row_levels();
    let cols = a.col_levels();
    let mut worst = 0.0_f64;
    for i in 0..rows.saturating_sub(1) {
        for j in 0..cols {
            let mut lhs = a.blocks[i][j].clone();
            lhs -= model.a1(i) * &a.blocks[i][j];
            if i >= 1 {
                lhs -= model.a2(i) * &a.blocks[i - 1][j];
            }
            lhs -= model.a0(i) * &a.blocks[i + 1][j];
            let resid = lhs - b.block(i, j);
            worst = worst.max(linalg::max_norm(&resid));
        }
    }
    worst
}
