//! Minimal nonnegative R-, G-measures, the U-measure, the censored chain at
//! level 0 and the operators behind the UL-type RG-factorization
//! `I - P = (I - R_U)(I - Psi_D)(I - G_L)`.
//!
//! The homogeneous tail is solved by logarithmic reduction (quadratically
//! convergent, with a simple fixed-point fallback); the level-dependent
//! prefix follows by backward resolvent recursions:
//!
//! ```text
//! R_l = A0^(l) (I - U_{l+1})^-1        l = N*-1 .. 0
//! G_k = (I - U_k)^-1 A2^(k)            k = N*   .. 1
//! U_l = A1^(l) + R_l A2^(l+1)
//! ```

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::blocks::{BlockMatrixWindow, BlockRows};
use crate::error::{QbdError, Result};
use crate::linalg;
use crate::model::QbdModel;

/// Hard cap on terms of the `(I - R_U)^{-1}` series.
pub const SERIES_CAP: usize = 10_000;

/// Tail solver budget: logarithmic-reduction sweeps and fallback iterations.
pub const MAX_LR_SWEEPS: usize = 64;
pub const MAX_FIXED_POINT_ITERS: usize = 1_000_000;

/// Spectral radii this close to 1 are treated as not positive recurrent.
const RECURRENCE_MARGIN: f64 = 1e-9;

/// Tail R and G blocks with solve metadata.
#[derive(Debug, Clone)]
pub struct TailRg {
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub spectral_radius: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// The computed R-, G-, U-measures of a level-dependent QBD, the censored
/// chain `U_0` with its stationary vector `v_0` and fundamental matrix
/// `Z = (I - U_0 + e v_0)^{-1}`.
#[derive(Debug, Clone)]
pub struct RgFactorization {
    /// Phase sizes `m_0 .. m_{N*}`.
    pub phase_sizes: Vec<usize>,
    /// First homogeneous level `N*`.
    pub n_star: usize,
    /// `R_0 .. R_{N*-1}`; levels `>= N*` use `r_tail`.
    pub r_blocks: Vec<DMatrix<f64>>,
    pub r_tail: DMatrix<f64>,
    /// `G_1 .. G_{N*}`; levels `> N*` use `g_tail`.
    pub g_blocks: Vec<DMatrix<f64>>,
    pub g_tail: DMatrix<f64>,
    /// `U_0 .. U_{N*}`; levels `> N*` reuse the last entry.
    pub u_blocks: Vec<DMatrix<f64>>,
    /// Fundamental matrix of the censored level-0 chain.
    pub z: DMatrix<f64>,
    /// Stationary row vector of `U_0`.
    pub v0: RowDVector<f64>,
    /// `sp(tail R)`, strictly below 1 for positive-recurrent chains.
    pub tail_spectral_radius: f64,
    /// Convergence tolerance the tail was solved to.
    pub tol: f64,
    /// Logarithmic-reduction sweeps spent on the tail (prefix blocks each
    /// take one direct solve).
    pub tail_iterations: usize,
    /// Max residual of the R fixed-point equation over the checked levels.
    pub reqn_residual: f64,
    /// Max residual of the G fixed-point equation over the checked levels.
    pub geqn_residual: f64,
}

/// Solve the level-independent fixed points
/// `R = A0 + R A1 + R^2 A2` and `G = A2 + A1 G + A0 G^2`
/// for their minimal nonnegative solutions.
pub fn solve_tail_rg(
    a2: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    a0: &DMatrix<f64>,
    tol: f64,
) -> Result<TailRg> {
    if tol <= 0.0 {
        return Err(QbdError::Argument("tol must be positive".into()));
    }
    let (mut g, mut iterations) = match logarithmic_reduction_g(a2, a1, a0, tol) {
        Ok(pair) => pair,
        Err(_) => fixed_point_g(a2, a1, a0, tol)?,
    };

    // Defect-correction polish: the natural iteration contracts near the
    // minimal solution, so a few extra passes push the residual under tol.
    let g_residual = |g: &DMatrix<f64>| linalg::max_norm(&(a0 * g * g + a1 * g + a2 - g));
    let mut res_g = g_residual(&g);
    let mut polish = 0;
    while res_g > tol && polish < 256 {
        g = a2 + a1 * &g + a0 * &g * &g;
        res_g = g_residual(&g);
        polish += 1;
        iterations += 1;
    }
    if res_g > tol {
        return Err(QbdError::Nonconvergence {
            what: "tail G fixed point".into(),
            iterations,
            residual: res_g,
        });
    }

    let u = a1 + a0 * &g;
    let n = u.nrows();
    let mut r = a0 * linalg::inverse(&(DMatrix::identity(n, n) - &u), "tail R resolvent (I - U)")?;
    let r_residual = |r: &DMatrix<f64>| linalg::max_norm(&(a0 + r * a1 + r * r * a2 - r));
    let mut res_r = r_residual(&r);
    polish = 0;
    while res_r > tol && polish < 256 {
        r = a0 + &r * a1 + &r * &r * a2;
        res_r = r_residual(&r);
        polish += 1;
    }
    if res_r > tol {
        return Err(QbdError::Nonconvergence {
            what: "tail R fixed point".into(),
            iterations,
            residual: res_r,
        });
    }

    let spectral_radius = linalg::spectral_radius(&r);
    if spectral_radius >= 1.0 - RECURRENCE_MARGIN {
        return Err(QbdError::NotPositiveRecurrent { spectral_radius });
    }

    Ok(TailRg {
        r,
        g,
        u,
        spectral_radius,
        iterations,
        residual: res_g.max(res_r),
    })
}

/// Logarithmic reduction for the minimal G; quadratic convergence for
/// recurrent and transient tails alike.
fn logarithmic_reduction_g(
    a2: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    a0: &DMatrix<f64>,
    tol: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let n = a1.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let resolvent = linalg::inverse(&(&eye - a1), "logarithmic reduction (I - A1)")?;
    let mut up = &resolvent * a0;
    let mut down = &resolvent * a2;
    let mut g = down.clone();
    let mut t = up.clone();

    for sweep in 1..=MAX_LR_SWEEPS {
        if linalg::max_norm(&t) < tol * 1e-2 {
            return Ok((g, sweep));
        }
        let cross = &up * &down + &down * &up;
        let w = linalg::inverse(&(&eye - cross), "logarithmic reduction sweep")?;
        let up2 = &up * &up;
        let down2 = &down * &down;
        up = &w * up2;
        down = &w * down2;
        g += &t * &down;
        t *= &up;
    }
    if linalg::max_norm(&t) < tol * 1e-2 {
        Ok((g, MAX_LR_SWEEPS))
    } else {
        Err(QbdError::Nonconvergence {
            what: "logarithmic reduction".into(),
            iterations: MAX_LR_SWEEPS,
            residual: linalg::max_norm(&t),
        })
    }
}

/// Plain functional iteration from G = 0; converges to the minimal solution.
fn fixed_point_g(
    a2: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    a0: &DMatrix<f64>,
    tol: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let mut g = DMatrix::<f64>::zeros(a2.nrows(), a2.ncols());
    for it in 1..=MAX_FIXED_POINT_ITERS {
        let next = a2 + a1 * &g + a0 * &g * &g;
        let delta = linalg::max_norm(&(&next - &g));
        g = next;
        if delta < tol * 1e-2 {
            return Ok((g, it));
        }
    }
    Err(QbdError::Nonconvergence {
        what: "tail G fixed point from zero".into(),
        iterations: MAX_FIXED_POINT_ITERS,
        residual: f64::NAN,
    })
}

/// Solve the full level-dependent factorization of a validated model.
pub fn solve_level_dependent(model: &QbdModel, tol: f64) -> Result<RgFactorization> {
    let n_star = model.inhomogeneity_bound();
    let tail = model.tail();
    let tail_rg = solve_tail_rg(&tail.a2, &tail.a1, &tail.a0, tol)?;

    // Backward pass: U_{N*} is the tail U; each step needs (I - U_{l+1})^-1.
    let mut u_blocks = vec![DMatrix::<f64>::zeros(0, 0); n_star + 1];
    let mut r_blocks = vec![DMatrix::<f64>::zeros(0, 0); n_star];
    let mut g_blocks = vec![DMatrix::<f64>::zeros(0, 0); n_star];
    u_blocks[n_star] = tail_rg.u.clone();

    for l in (0..n_star).rev() {
        let m_next = model.phase_size(l + 1);
        let resolvent = linalg::inverse(
            &(DMatrix::identity(m_next, m_next) - &u_blocks[l + 1]),
            &format!("backward recursion at level {}", l + 1),
        )?;
        // G_{l+1} = (I - U_{l+1})^-1 A2^(l+1)
        g_blocks[l] = &resolvent * model.a2(l + 1);
        // R_l = A0^(l) (I - U_{l+1})^-1
        r_blocks[l] = model.a0(l) * &resolvent;
        u_blocks[l] = model.a1(l) + &r_blocks[l] * model.a2(l + 1);
    }

    let u0 = &u_blocks[0];
    if !linalg::strongly_connected(u0) {
        return Err(QbdError::Reducible {
            context: "censored chain U0".into(),
        });
    }
    let v0 = linalg::stationary_row(u0, "stationary vector of U0")?;
    let m0 = u0.nrows();
    let e = DVector::<f64>::repeat(m0, 1.0);
    let z = linalg::inverse(
        &(DMatrix::identity(m0, m0) - u0 + &e * &v0),
        "fundamental matrix (I - U0 + e v0)",
    )?;

    let mut f = RgFactorization {
        phase_sizes: model.phase_sizes().to_vec(),
        n_star,
        r_blocks,
        r_tail: tail_rg.r,
        g_blocks,
        g_tail: tail_rg.g,
        u_blocks,
        z,
        v0,
        tail_spectral_radius: tail_rg.spectral_radius,
        tol,
        tail_iterations: tail_rg.iterations,
        reqn_residual: 0.0,
        geqn_residual: 0.0,
    };
    let (rres, gres) = fixed_point_residuals(model, &f, n_star + 2);
    f.reqn_residual = rres;
    f.geqn_residual = gres;
    Ok(f)
}

/// Max residuals of the defining fixed-point equations over levels
/// `0..=window` (R) and `1..=window` (G).
pub fn fixed_point_residuals(model: &QbdModel, f: &RgFactorization, window: usize) -> (f64, f64) {
    let mut rres = 0.0_f64;
    let mut gres = 0.0_f64;
    for l in 0..=window {
        let lhs = model.a0(l) + f.r(l) * model.a1(l + 1) + f.r(l) * f.r(l + 1) * model.a2(l + 2);
        rres = rres.max(linalg::max_norm(&(lhs - f.r(l))));
    }
    for k in 1..=window {
        let lhs = model.a0(k) * f.g(k + 1) * f.g(k) + model.a1(k) * f.g(k) + model.a2(k);
        gres = gres.max(linalg::max_norm(&(lhs - f.g(k))));
    }
    (rres, gres)
}

impl RgFactorization {
    /// Phase count of level `k`.
    pub fn phase_size(&self, level: usize) -> usize {
        self.phase_sizes[level.min(self.n_star)]
    }

    /// `R_l` (tail block for `l >= N*`).
    pub fn r(&self, level: usize) -> &DMatrix<f64> {
        if level < self.n_star {
            &self.r_blocks[level]
        } else {
            &self.r_tail
        }
    }

    /// `G_k`, `k >= 1` (tail block for `k > N*`).
    pub fn g(&self, level: usize) -> &DMatrix<f64> {
        assert!(level >= 1, "G is defined for levels >= 1");
        if level <= self.n_star {
            &self.g_blocks[level - 1]
        } else {
            &self.g_tail
        }
    }

    /// `U_l` (tail block for `l > N*`).
    pub fn u(&self, level: usize) -> &DMatrix<f64> {
        &self.u_blocks[level.min(self.n_star)]
    }

    /// `X_k^{(l)} = R_l R_{l+1} ... R_{l+k-1}`, `k >= 1`.
    pub fn x_product(&self, level: usize, k: usize) -> Result<DMatrix<f64>> {
        if k == 0 {
            return Err(QbdError::Argument("x_product needs k >= 1".into()));
        }
        let mut acc = self.r(level).clone();
        for i in 1..k {
            acc *= self.r(level + i);
        }
        Ok(acc)
    }

    /// `Y_k^{(l)} = G_l G_{l-1} ... G_{l-k+1}`, `1 <= k <= l`.
    pub fn y_product(&self, level: usize, k: usize) -> Result<DMatrix<f64>> {
        if k == 0 || k > level {
            return Err(QbdError::Argument(format!(
                "y_product needs 1 <= k <= l (got k = {k}, l = {level})"
            )));
        }
        let mut acc = self.g(level).clone();
        for i in 1..k {
            acc *= self.g(level - i);
        }
        Ok(acc)
    }

    /// Row `i` of `(I - R_U)^{-1} B`:
    /// `B_i + sum_{k>=1} X_k^{(i)} B_{i+k}`, truncated at the first `k`
    /// where `|X_k^{(i)}| * bound(B_{i+k}) < eps_tail`.
    pub fn apply_ru_inverse(
        &self,
        b: &dyn BlockRows,
        row_levels: usize,
        col_levels: usize,
        eps_tail: f64,
    ) -> Result<BlockMatrixWindow> {
        let row_sizes: Vec<usize> = (0..row_levels).map(|i| self.phase_size(i)).collect();
        let col_sizes: Vec<usize> = (0..col_levels).map(|j| self.phase_size(j)).collect();
        let mut out = BlockMatrixWindow::zeros(row_sizes, col_sizes);

        let mut horizon = 0usize;
        let mut tail_norm = 0.0_f64;
        for i in 0..row_levels {
            for j in 0..col_levels {
                out.blocks[i][j] = b.block(i, j);
            }
            let mut x = self.r(i).clone(); // X_1^{(i)}
            let mut k = 1usize;
            loop {
                let bound = linalg::max_norm(&x) * b.row_norm_bound(i + k);
                if bound < eps_tail {
                    horizon = horizon.max(k);
                    tail_norm = tail_norm.max(bound);
                    break;
                }
                if k >= SERIES_CAP {
                    return Err(QbdError::Nonconvergence {
                        what: "(I - R_U)^{-1} series".into(),
                        iterations: SERIES_CAP,
                        residual: bound,
                    });
                }
                for j in 0..col_levels {
                    out.blocks[i][j] += &x * b.block(i + k, j);
                }
                x *= self.r(i + k);
                k += 1;
            }
        }
        out.horizon = horizon;
        out.horizon_tail_norm = tail_norm;
        Ok(out)
    }

    /// `(I - G_L)^{-1} X` by forward substitution:
    /// row `i` is `X_i + G_i * row_{i-1}`, a finite sum.
    pub fn apply_gl_inverse(&self, x: &BlockMatrixWindow) -> BlockMatrixWindow {
        let mut out = x.clone();
        for i in 1..out.row_levels() {
            let prev = out.blocks[i - 1].clone();
            let g = self.g(i);
            for (b, p) in out.blocks[i].iter_mut().zip(&prev) {
                *b += g * p;
            }
        }
        out
    }
}

/// Assemble `(I - R_U)(I - Psi_D)(I - G_L)` over levels `0..=window` and
/// return the max-norm of its difference from `I - P` on block rows
/// `0..=window-2` (the last two rows see the truncation).
pub fn rg_residual(model: &QbdModel, f: &RgFactorization, window: usize) -> Result<f64> {
    if window < model.inhomogeneity_bound() + 2 {
        return Err(QbdError::Argument(format!(
            "rg_residual window {window} must be >= N* + 2 = {}",
            model.inhomogeneity_bound() + 2
        )));
    }
    let sizes: Vec<usize> = (0..=window).map(|k| model.phase_size(k)).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0usize, |acc, &m| {
            let o = *acc;
            *acc += m;
            Some(o)
        })
        .collect();
    let total: usize = sizes.iter().sum();

    let place = |dst: &mut DMatrix<f64>, i: usize, j: usize, b: &DMatrix<f64>, sign: f64| {
        for r in 0..b.nrows() {
            for c in 0..b.ncols() {
                dst[(offsets[i] + r, offsets[j] + c)] += sign * b[(r, c)];
            }
        }
    };

    let mut ru = DMatrix::<f64>::identity(total, total);
    for l in 0..window {
        place(&mut ru, l, l + 1, f.r(l), -1.0);
    }
    let mut psi = DMatrix::<f64>::identity(total, total);
    for l in 0..=window {
        place(&mut psi, l, l, f.u(l), -1.0);
    }
    let mut gl = DMatrix::<f64>::identity(total, total);
    for k in 1..=window {
        place(&mut gl, k, k - 1, f.g(k), -1.0);
    }

    let mut imp = DMatrix::<f64>::identity(total, total);
    for i in 0..=window {
        for j in i.saturating_sub(1)..=(i + 1).min(window) {
            if let Some(b) = model.p_block(i, j) {
                place(&mut imp, i, j, b, -1.0);
            }
        }
    }

    let product = ru * psi * gl;
    let diff = product - imp;
    let last_ok_row = offsets[window - 1]; // exclude block rows window-1, window
    let mut res = 0.0_f64;
    for r in 0..last_ok_row {
        for c in 0..total {
            res = res.max(diff[(r, c)].abs());
        }
    }
    Ok(res)
}
