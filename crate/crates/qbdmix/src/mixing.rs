//! First-passage and mixing-time moments of the QBD through the
//! factorization: the mean matrix `M`, the mixing matrix `L = M diag(pi)`,
//! the per-state mean vector `eta` (windowed partial sums with a divergence
//! detector), censored Kemeny constants, second moments `M^(2)`, `L^(2)`,
//! `eta^(2)` and the variance vector `V^(2)`.
//!
//! The right sides are built from the piecewise case tables
//!
//! ```text
//! F_{i,j} = w_i 1^T - corr(i,j) diag(pi_j)^{-1}
//! S_{i,j} = w_i 1^T + 2 sum_k X_k^{(i)} Lam_{k+i,j} - corr(i,j) D2_j
//! ```
//!
//! with `w_i = e + sum_k X_k^{(i)} e` (closed form through `(I - R)^{-1} e`
//! on the homogeneous tail), `corr` the collapsed tridiagonal correction
//! (`X_{j-i}` above the diagonal, `U_i` on it, `A2^{(i)}` just below, empty
//! otherwise), `Lam` the `P M` rows and `D2_j` the second-moment diagonal
//! `diag(pi_j)^{-1} (I + 2 diag(d_j))`, `d_j = sum_i pi_i M_{i,j}`.
//!
//! Row recurrences `M_i = X_i + G_i M_{i-1}` realize `(I - G_L)^{-1}`, and
//! the per-column free constants are pinned so the window diagonal matches
//! mean return times (`1/pi`) or an independent dense second-moment oracle.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockMatrixWindow, BlockRows};
use crate::error::{QbdError, Result};
use crate::factorization::{RgFactorization, SERIES_CAP};
use crate::linalg;
use crate::model::{truncate_dense, BoundaryPolicy, QbdModel};
use crate::oracle;
use crate::poisson::{self, Pin, PinPolicy, PoissonSolution};
use crate::stationary::StationaryWindow;

/// Partial sums growing faster than this between the last two column
/// increments raise the divergence flag.
pub const DIVERGENCE_GROWTH_THRESHOLD: f64 = 0.01;

// ---------------------------------------------------------------------------
// Right-side generators for the generic Poisson engine (dual routes)
// ---------------------------------------------------------------------------

/// `B = E - P diag(pi)^{-1}`, the right side of the mean-first-passage
/// equation, served row by row.
pub struct MfptRhs<'a> {
    model: &'a QbdModel,
    dinv: Vec<DMatrix<f64>>,
    bound: f64,
}

impl<'a> MfptRhs<'a> {
    pub fn new(model: &'a QbdModel, pi: &StationaryWindow, j_max: usize) -> Result<Self> {
        let dinv: Vec<DMatrix<f64>> = (0..=j_max)
            .map(|j| pi.diag_pi_inverse(j))
            .collect::<Result<_>>()?;
        let dmax = dinv.iter().map(linalg::max_norm).fold(0.0_f64, f64::max);
        Ok(MfptRhs {
            model,
            dinv,
            bound: 1.0 + dmax,
        })
    }
}

impl BlockRows for MfptRhs<'_> {
    fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let mi = self.model.phase_size(i);
        let mj = self.model.phase_size(j);
        let mut out = DMatrix::from_element(mi, mj, 1.0);
        if let Some(p) = self.model.p_block(i, j) {
            out -= p * &self.dinv[j];
        }
        out
    }
    fn row_norm_bound(&self, _i: usize) -> f64 {
        self.bound
    }
}

/// `B = e pi - P`, the right side of the mixing-matrix equation.
pub struct MixingRhs<'a> {
    model: &'a QbdModel,
    pi_rows: Vec<RowDVector<f64>>,
}

impl<'a> MixingRhs<'a> {
    pub fn new(model: &'a QbdModel, pi: &StationaryWindow, j_max: usize) -> Self {
        MixingRhs {
            model,
            pi_rows: (0..=j_max).map(|j| pi.pi(j).clone()).collect(),
        }
    }
}

impl BlockRows for MixingRhs<'_> {
    fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let mi = self.model.phase_size(i);
        let e = DVector::<f64>::repeat(mi, 1.0);
        let mut out = &e * &self.pi_rows[j];
        if let Some(p) = self.model.p_block(i, j) {
            out -= p;
        }
        out
    }
    fn row_norm_bound(&self, _i: usize) -> f64 {
        2.0
    }
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

/// Per-model caches used by both moment solvers.
struct Shared<'a> {
    model: &'a QbdModel,
    f: &'a RgFactorization,
    eps_tail: f64,
    col_levels: usize,
    /// `w_i = e + sum_k X_k^{(i)} e` for `i = 0..=N*` (tail entry last).
    w: Vec<DVector<f64>>,
    /// `(I - U_k)^{-1}` for `k = 1..=N*` (tail entry last).
    resolvents: Vec<DMatrix<f64>>,
}

impl<'a> Shared<'a> {
    fn new(
        model: &'a QbdModel,
        f: &'a RgFactorization,
        col_levels: usize,
        eps_tail: f64,
    ) -> Result<Self> {
        let n_star = model.inhomogeneity_bound();
        let m_tail = model.phase_size(n_star);
        let e_tail = DVector::<f64>::repeat(m_tail, 1.0);
        let w_tail = (DMatrix::identity(m_tail, m_tail) - &f.r_tail)
            .lu()
            .solve(&e_tail)
            .ok_or_else(|| QbdError::Singular {
                context: "(I - R) e for the tail E-sums".into(),
            })?;
        let mut w = vec![DVector::zeros(0); n_star + 1];
        w[n_star] = w_tail;
        for i in (0..n_star).rev() {
            let e_i = DVector::<f64>::repeat(model.phase_size(i), 1.0);
            w[i] = e_i + f.r(i) * &w[i + 1];
        }
        let mut resolvents = Vec::with_capacity(n_star);
        for k in 1..=n_star {
            let mk = model.phase_size(k);
            resolvents.push(linalg::inverse(
                &(DMatrix::identity(mk, mk) - f.u(k)),
                &format!("(I - U_{k})"),
            )?);
        }
        Ok(Shared {
            model,
            f,
            eps_tail,
            col_levels,
            w,
            resolvents,
        })
    }

    fn w_vec(&self, i: usize) -> &DVector<f64> {
        &self.w[i.min(self.model.inhomogeneity_bound())]
    }

    fn resolvent(&self, k: usize) -> &DMatrix<f64> {
        &self.resolvents[k.min(self.model.inhomogeneity_bound()) - 1]
    }

    /// `w_i 1^T` blocks for every column level.
    fn base_row(&self, i: usize) -> Vec<DMatrix<f64>> {
        let w = self.w_vec(i);
        (0..self.col_levels)
            .map(|j| {
                let ones = RowDVector::<f64>::repeat(self.model.phase_size(j), 1.0);
                w * &ones
            })
            .collect()
    }

    /// Subtract the collapsed tridiagonal correction `corr(i,j) * diag_j`
    /// from a row of blocks.
    fn subtract_correction(&self, i: usize, row: &mut [DMatrix<f64>], diag: &[DMatrix<f64>]) {
        if i >= 1 && i - 1 < self.col_levels {
            row[i - 1] -= self.model.a2(i) * &diag[i - 1];
        }
        if i < self.col_levels {
            row[i] -= self.f.u(i) * &diag[i];
        }
        if i + 1 < self.col_levels {
            let mut x = self.f.r(i).clone(); // X_{j-i}^{(i)}, starting at j = i+1
            for j in i + 1..self.col_levels {
                row[j] -= &x * &diag[j];
                if j + 1 < self.col_levels {
                    x *= self.f.r(j);
                }
            }
        }
    }

    /// Propagation directions `s_i = Y_i^{(i)} e` for constants at level 0.
    fn shift_dir(&self, prev: Option<&DVector<f64>>, i: usize) -> DVector<f64> {
        match prev {
            None => DVector::repeat(self.model.phase_size(0), 1.0),
            Some(p) => self.f.g(i) * p,
        }
    }
}

/// Serves `pi_i` rows past a finite window by continuing the product
/// `pi_i = pi_{i-1} R_{i-1}`.
struct PiExtender<'a> {
    pi: &'a StationaryWindow,
    f: &'a RgFactorization,
    extra: Vec<RowDVector<f64>>,
}

impl<'a> PiExtender<'a> {
    fn new(pi: &'a StationaryWindow, f: &'a RgFactorization) -> Self {
        PiExtender {
            pi,
            f,
            extra: Vec::new(),
        }
    }

    fn row(&mut self, i: usize) -> &RowDVector<f64> {
        let last = self.pi.max_level();
        if i <= last {
            return self.pi.pi(i);
        }
        while self.extra.len() < i - last {
            let level = last + self.extra.len(); // row being extended from
            let prev = self.extra.last().unwrap_or_else(|| self.pi.pi(last));
            self.extra.push(prev * self.f.r(level));
        }
        &self.extra[i - last - 1]
    }
}

// ---------------------------------------------------------------------------
// Mean first passage
// ---------------------------------------------------------------------------

/// Incremental builder for the mean-first-passage window; rows extend on
/// demand so stationary-weighted sums over levels can run past the window.
pub struct MfptSolver<'a> {
    shared: Shared<'a>,
    dinv: Vec<DMatrix<f64>>,
    /// `M` rows with the diagonal pin already applied.
    rows: Vec<Vec<DMatrix<f64>>>,
    shift_dirs: Vec<DVector<f64>>,
    constants: Vec<RowDVector<f64>>,
}

impl<'a> MfptSolver<'a> {
    /// Build rows `0..=max(i_max, j_max)` and pin the diagonal to the mean
    /// return times `1/pi`.
    pub fn new(
        model: &'a QbdModel,
        f: &'a RgFactorization,
        pi: &StationaryWindow,
        i_max: usize,
        j_max: usize,
        eps_tail: f64,
    ) -> Result<Self> {
        if pi.max_level() < j_max {
            return Err(QbdError::Argument(format!(
                "pi window reaches level {} but columns need {}",
                pi.max_level(),
                j_max
            )));
        }
        let shared = Shared::new(model, f, j_max + 1, eps_tail)?;
        let dinv: Vec<DMatrix<f64>> = (0..=j_max)
            .map(|j| pi.diag_pi_inverse(j))
            .collect::<Result<_>>()?;
        let mut solver = MfptSolver {
            shared,
            dinv,
            rows: Vec::new(),
            shift_dirs: Vec::new(),
            constants: Vec::new(),
        };
        solver.ensure_rows(i_max.max(j_max))?;
        solver.pin_diagonal()?;
        Ok(solver)
    }

    /// `F_{i,j}` for all window columns.
    fn f_row(&self, i: usize) -> Vec<DMatrix<f64>> {
        let mut row = self.shared.base_row(i);
        self.shared.subtract_correction(i, &mut row, &self.dinv);
        row
    }

    /// Unpinned solve row: `Z F_0` at level 0, `(I - U_i)^{-1} F_i` above.
    fn solve_row(&self, i: usize) -> Result<Vec<DMatrix<f64>>> {
        let fr = self.f_row(i);
        if i == 0 {
            let f0 = hcat(&fr);
            let sol = poisson::solve_censored_with(&self.shared.f.z, &self.shared.f.v0, &f0)?;
            Ok(split_row(&sol.particular, &fr))
        } else {
            let res = self.shared.resolvent(i);
            Ok(fr.iter().map(|b| res * b).collect())
        }
    }

    /// Extend `M` rows (with the current pin) through level `depth`.
    pub fn ensure_rows(&mut self, depth: usize) -> Result<()> {
        while self.rows.len() <= depth {
            let i = self.rows.len();
            let mut row = self.solve_row(i)?;
            if i > 0 {
                // Rows i >= 1 inherit the pin constants from the previous
                // (already shifted) row through G_i * row_{i-1}.
                let g = self.shared.f.g(i);
                for (j, b) in row.iter_mut().enumerate() {
                    *b += g * &self.rows[i - 1][j];
                }
            }
            let dir = self.shared.shift_dir(self.shift_dirs.last(), i);
            if i == 0 && !self.constants.is_empty() {
                for (j, c0) in self.constants.iter().enumerate() {
                    add_outer(&mut row[j], &dir, c0);
                }
            }
            self.shift_dirs.push(dir);
            self.rows.push(row);
        }
        Ok(())
    }

    /// Fix each column's free constant so `M_{(j,a),(j,a)} = 1/pi_{j,a}`.
    fn pin_diagonal(&mut self) -> Result<()> {
        let cols = self.shared.col_levels;
        self.ensure_rows(cols - 1)?;
        let mut constants = Vec::with_capacity(cols);
        for j in 0..cols {
            let mj = self.shared.model.phase_size(j);
            let mut delta = RowDVector::<f64>::zeros(mj);
            for ph in 0..mj {
                let target = self.dinv[j][(ph, ph)];
                let current = self.rows[j][j][(ph, ph)];
                delta[ph] = (target - current) / self.shift_dirs[j][ph];
            }
            constants.push(delta);
        }
        for (i, row) in self.rows.iter_mut().enumerate() {
            for (j, c0) in constants.iter().enumerate() {
                add_outer(&mut row[j], &self.shift_dirs[i], c0);
            }
        }
        self.constants = constants;
        Ok(())
    }

    /// `M_{i,j}`; rows must already be built.
    pub fn block(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.rows[i][j]
    }

    /// Snapshot of rows `0..=i_max` as a window.
    pub fn window(&self, i_max: usize) -> BlockMatrixWindow {
        let model = self.shared.model;
        let cols = self.shared.col_levels;
        BlockMatrixWindow {
            row_sizes: (0..=i_max).map(|i| model.phase_size(i)).collect(),
            col_sizes: (0..cols).map(|j| model.phase_size(j)).collect(),
            blocks: self.rows[..=i_max].to_vec(),
            horizon: 0,
            horizon_tail_norm: 0.0,
        }
    }

    /// Resolved `c_0` per column level.
    pub fn constants(&self) -> &[RowDVector<f64>] {
        &self.constants
    }

    /// `d_j = sum_i pi_i M_{i,j}` for every window column, extending rows
    /// until the running term drops below `eps_tail`.
    ///
    /// The `pi_i M_{i,j}` terms decay slower than `pi` itself (the `M` rows
    /// grow with the level), so `pi` rows past the supplied window are
    /// extended through the `R`-products on the fly.
    pub fn stationary_weighted_diag(
        &mut self,
        pi: &StationaryWindow,
    ) -> Result<Vec<RowDVector<f64>>> {
        let cols = self.shared.col_levels;
        let mut sums: Vec<RowDVector<f64>> = (0..cols)
            .map(|j| RowDVector::zeros(self.shared.model.phase_size(j)))
            .collect();
        let mut extender = PiExtender::new(pi, self.shared.f);
        // Per-column truncation keeps each d_j independent of the window.
        let mut active = vec![true; cols];
        let mut i = 0usize;
        while active.contains(&true) {
            self.ensure_rows(i)?;
            let pi_i = extender.row(i).clone();
            for (j, sum) in sums.iter_mut().enumerate() {
                if !active[j] {
                    continue;
                }
                let term = &pi_i * &self.rows[i][j];
                let norm = term.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
                *sum += term;
                if norm < self.shared.eps_tail {
                    active[j] = false;
                }
            }
            i += 1;
            if i >= SERIES_CAP {
                return Err(QbdError::Nonconvergence {
                    what: "(e pi M)_d level sums".into(),
                    iterations: SERIES_CAP,
                    residual: f64::NAN,
                });
            }
        }
        Ok(sums)
    }
}

/// The mean-first-passage window `M` with diagonal entries pinned to
/// `1/pi_{k,j}`.
pub fn mean_first_passage(
    model: &QbdModel,
    f: &RgFactorization,
    pi: &StationaryWindow,
    window: (usize, usize),
    eps_tail: f64,
) -> Result<BlockMatrixWindow> {
    let solver = MfptSolver::new(model, f, pi, window.0, window.1, eps_tail)?;
    Ok(solver.window(window.0))
}

// ---------------------------------------------------------------------------
// Mixing matrix and eta
// ---------------------------------------------------------------------------

/// `L = M diag(pi)` blockwise.
pub fn mean_mixing_matrix(m: &BlockMatrixWindow, pi: &StationaryWindow) -> BlockMatrixWindow {
    let mut l = m.clone();
    for row in l.blocks.iter_mut() {
        for (j, block) in row.iter_mut().enumerate() {
            for c in 0..block.ncols() {
                let p = pi.prob(j, c);
                for r in 0..block.nrows() {
                    block[(r, c)] *= p;
                }
            }
        }
    }
    l
}

/// Independent route for `L`: solve `(I - P) L = e pi - P` through the
/// generic Poisson engine, pinning the diagonal at its known value 1.
pub fn mean_mixing_matrix_via_poisson(
    model: &QbdModel,
    f: &RgFactorization,
    pi: &StationaryWindow,
    window: (usize, usize),
    eps_tail: f64,
) -> Result<PoissonSolution> {
    let rhs = MixingRhs::new(model, pi, window.1);
    let targets: Vec<DVector<f64>> = (0..=window.1)
        .map(|j| DVector::repeat(model.phase_size(j), 1.0))
        .collect();
    poisson::solve_matrix_poisson(
        f,
        pi,
        &rhs,
        Pin::Diagonal {
            targets,
            policy: PinPolicy::DiagonalMfpt,
        },
        window,
        eps_tail,
    )
}

/// Windowed partial sums of `eta = M pi^T` per start state, plus the
/// stationary partial `tau = pi M e` and a divergence detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaVector {
    /// Partial sums per state, rows flattened `(level, phase)` in order.
    pub per_state: Vec<f64>,
    /// `pi (M e)` over the window.
    pub tau_partial: f64,
    /// Largest relative growth of the per-state partial sums between the
    /// last two column increments.
    pub last_growth: f64,
    /// True when `last_growth` exceeds 1%.
    pub divergence_flag: bool,
}

/// Partial sums of `M pi^T` over the window columns.
pub fn eta_vector(m: &BlockMatrixWindow, pi: &StationaryWindow) -> EtaVector {
    let rows = m.row_levels();
    let cols = m.col_levels();
    let nstates: usize = m.row_sizes.iter().sum();
    let mut upto_prev = vec![0.0_f64; nstates];
    let mut full = vec![0.0_f64; nstates];
    let mut off = 0usize;
    for i in 0..rows {
        for r in 0..m.row_sizes[i] {
            let mut acc = 0.0;
            for j in 0..cols {
                let b = &m.blocks[i][j];
                let mut term = 0.0;
                for c in 0..b.ncols() {
                    term += b[(r, c)] * pi.prob(j, c);
                }
                acc += term;
                if j + 1 == cols {
                    upto_prev[off + r] = acc - term;
                }
            }
            full[off + r] = acc;
        }
        off += m.row_sizes[i];
    }

    let mut last_growth = 0.0_f64;
    if cols >= 2 {
        for s in 0..nstates {
            if upto_prev[s] > 0.0 {
                last_growth = last_growth.max((full[s] - upto_prev[s]) / upto_prev[s]);
            }
        }
    }

    let mut tau = 0.0;
    let mut off = 0usize;
    for i in 0..rows {
        for r in 0..m.row_sizes[i] {
            tau += pi.prob(i, r) * full[off + r];
        }
        off += m.row_sizes[i];
    }

    EtaVector {
        per_state: full,
        tau_partial: tau,
        last_growth,
        divergence_flag: last_growth > DIVERGENCE_GROWTH_THRESHOLD,
    }
}

// ---------------------------------------------------------------------------
// Kemeny constants
// ---------------------------------------------------------------------------

/// The generalized Kemeny constant `trace(Z)` of the censored level-0 chain.
pub fn kemeny_censored(f: &RgFactorization) -> f64 {
    f.z.trace()
}

/// Censor `U_0` down to two kept states and evaluate `1 + 1/(a + b)` on the
/// resulting 2x2 chain.
pub fn kemeny_censored_2x2(f: &RgFactorization, keep: (usize, usize)) -> Result<f64> {
    let u0 = f.u(0);
    let m0 = u0.nrows();
    if keep.0 == keep.1 {
        return Err(QbdError::Argument("kept states must differ".into()));
    }
    if keep.0 >= m0 || keep.1 >= m0 {
        return Err(QbdError::Argument(format!(
            "kept states {keep:?} out of range for m0 = {m0}"
        )));
    }
    let kept = [keep.0, keep.1];
    let rest: Vec<usize> = (0..m0).filter(|s| !kept.contains(s)).collect();
    let sub = |rows: &[usize], cols: &[usize]| {
        DMatrix::<f64>::from_fn(rows.len(), cols.len(), |r, c| u0[(rows[r], cols[c])])
    };
    let censored = if rest.is_empty() {
        sub(&kept, &kept)
    } else {
        let p11 = sub(&kept, &kept);
        let p12 = sub(&kept, &rest);
        let p21 = sub(&rest, &kept);
        let p22 = sub(&rest, &rest);
        let nr = rest.len();
        let fold = linalg::solve(
            &(DMatrix::identity(nr, nr) - p22),
            &p21,
            "(I - P22) in 2x2 censoring",
        )?;
        p11 + p12 * fold
    };
    let a = censored[(0, 1)];
    let b = censored[(1, 0)];
    if a + b <= 0.0 {
        return Err(QbdError::Reducible {
            context: "2x2 censored chain has no cross transitions".into(),
        });
    }
    Ok(1.0 + 1.0 / (a + b))
}

/// `kemeny_censored_2x2` over every kept pair; the spread across pairs is
/// reported, not asserted.
pub fn kemeny_censored_2x2_sweep(f: &RgFactorization) -> Result<Vec<(usize, usize, f64)>> {
    let m0 = f.u(0).nrows();
    if m0 < 2 {
        return Err(QbdError::Argument(
            "2x2 censoring needs at least two boundary phases".into(),
        ));
    }
    let mut out = Vec::new();
    for i in 0..m0 {
        for j in i + 1..m0 {
            out.push((i, j, kemeny_censored_2x2(f, (i, j))?));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Second moments
// ---------------------------------------------------------------------------

/// Second-moment window `M^(2)` plus the pinned constants and truncation
/// metadata.
#[derive(Debug, Clone)]
pub struct SecondMomentSolution {
    pub window: BlockMatrixWindow,
    pub constants: Vec<RowDVector<f64>>,
    /// `d_j = sum_i pi_i M_{i,j}` used in the `(e pi M)_d` diagonal.
    pub stationary_weighted_diag: Vec<RowDVector<f64>>,
}

struct SecondMomentBuilder<'a, 'b> {
    mfpt: &'b mut MfptSolver<'a>,
    d2: Vec<DMatrix<f64>>,
    horizon: usize,
    tail_norm: f64,
}

impl SecondMomentBuilder<'_, '_> {
    /// `Lam_{r,j} = (P M)_{r,j}` for all window columns.
    fn lambda_row(&mut self, r: usize) -> Result<Vec<DMatrix<f64>>> {
        self.mfpt.ensure_rows(r + 1)?;
        let model = self.mfpt.shared.model;
        let cols = self.mfpt.shared.col_levels;
        let mut out = Vec::with_capacity(cols);
        for j in 0..cols {
            let mut b = model.a1(r) * self.mfpt.block(r, j);
            b += model.a0(r) * self.mfpt.block(r + 1, j);
            if r >= 1 {
                b += model.a2(r) * self.mfpt.block(r - 1, j);
            }
            out.push(b);
        }
        Ok(out)
    }

    /// `S_{i,j} = w_i 1^T + 2 sum_{k>=0} X_k^{(i)} Lam_{k+i,j} - corr D2_j`.
    ///
    /// Each column truncates its own series, so a column's value never
    /// depends on which other columns share the window (prefix stability
    /// under window growth is then bit-exact).
    fn s_row(&mut self, i: usize) -> Result<Vec<DMatrix<f64>>> {
        let cols = self.mfpt.shared.col_levels;
        let mut row = self.mfpt.shared.base_row(i);

        // k = 0 term of the Lambda sum.
        let lam0 = self.lambda_row(i)?;
        for j in 0..cols {
            row[j] += 2.0 * &lam0[j];
        }
        let eps = self.mfpt.shared.eps_tail;
        let mut active = vec![true; cols];
        let mut x = self.mfpt.shared.f.r(i).clone();
        let mut k = 1usize;
        while active.contains(&true) {
            let lam = self.lambda_row(i + k)?;
            let x_norm = linalg::max_norm(&x);
            for j in 0..cols {
                if !active[j] {
                    continue;
                }
                let bound = x_norm * linalg::max_norm(&lam[j]);
                if bound < eps {
                    active[j] = false;
                    self.horizon = self.horizon.max(k);
                    self.tail_norm = self.tail_norm.max(bound);
                } else {
                    row[j] += 2.0 * (&x * &lam[j]);
                }
            }
            if k >= SERIES_CAP {
                return Err(QbdError::Nonconvergence {
                    what: "second-moment Lambda series".into(),
                    iterations: SERIES_CAP,
                    residual: x_norm,
                });
            }
            x *= self.mfpt.shared.f.r(i + k);
            k += 1;
        }

        let d2 = std::mem::take(&mut self.d2);
        self.mfpt.shared.subtract_correction(i, &mut row, &d2);
        self.d2 = d2;
        Ok(row)
    }
}

/// Solve the second-moment system with the per-column constants pinned to
/// an independent absorbing-chain oracle on the dense truncation at
/// `oracle_truncation`.
pub fn second_moment_first_passage(
    model: &QbdModel,
    f: &RgFactorization,
    pi: &StationaryWindow,
    window: (usize, usize),
    eps_tail: f64,
    oracle_truncation: usize,
) -> Result<SecondMomentSolution> {
    let (i_max, j_max) = window;
    let mut mfpt = MfptSolver::new(model, f, pi, i_max, j_max, eps_tail)?;
    let d = mfpt.stationary_weighted_diag(pi)?;

    // D2_j = diag(pi_j)^{-1} (I + 2 diag(d_j)).
    let mut d2 = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        let dinv = pi.diag_pi_inverse(j)?;
        let mj = model.phase_size(j);
        let mut scale = DMatrix::<f64>::identity(mj, mj);
        for ph in 0..mj {
            scale[(ph, ph)] += 2.0 * d[j][ph];
        }
        d2.push(dinv * scale);
    }

    let mut builder = SecondMomentBuilder {
        mfpt: &mut mfpt,
        d2,
        horizon: 0,
        tail_norm: 0.0,
    };

    // Solve rows bottom-up, then pin against the oracle.
    let depth = i_max.max(j_max);
    let mut s_rows = Vec::with_capacity(depth + 1);
    for i in 0..=depth {
        s_rows.push(builder.s_row(i)?);
    }
    let (horizon, tail_norm) = (builder.horizon, builder.tail_norm);

    // Oracle pin targets: return-time second moments of each target state.
    let chain = truncate_dense(model, oracle_truncation, BoundaryPolicy::ReflectToA1)?;
    let mut targets = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        let mj = model.phase_size(j);
        let mut t = DVector::<f64>::zeros(mj);
        for ph in 0..mj {
            let idx = chain.state_index(j, ph).ok_or_else(|| {
                QbdError::Argument(format!(
                    "oracle truncation {oracle_truncation} misses state ({j},{ph})"
                ))
            })?;
            let (_, m2) = oracle::dense_passage_moments(&chain, idx)?;
            t[ph] = m2[idx];
        }
        targets.push(t);
    }

    let shared = &mfpt.shared;
    let mut rows: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(depth + 1);
    let mut shift_dirs: Vec<DVector<f64>> = Vec::with_capacity(depth + 1);
    for (i, fr) in s_rows.iter().enumerate() {
        let mut row = if i == 0 {
            let s0 = hcat(fr);
            let sol = poisson::solve_censored_with(&shared.f.z, &shared.f.v0, &s0)?;
            split_row(&sol.particular, fr)
        } else {
            fr.iter().map(|b| shared.resolvent(i) * b).collect()
        };
        if i > 0 {
            let g = shared.f.g(i);
            for (j, b) in row.iter_mut().enumerate() {
                *b += g * &rows[i - 1][j];
            }
        }
        shift_dirs.push(shared.shift_dir(shift_dirs.last(), i));
        rows.push(row);
    }

    let mut constants = Vec::with_capacity(j_max + 1);
    for (j, target) in targets.iter().enumerate() {
        let mj = model.phase_size(j);
        let mut delta = RowDVector::<f64>::zeros(mj);
        for ph in 0..mj {
            delta[ph] = (target[ph] - rows[j][j][(ph, ph)]) / shift_dirs[j][ph];
        }
        constants.push(delta);
    }
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, c0) in constants.iter().enumerate() {
            add_outer(&mut row[j], &shift_dirs[i], c0);
        }
    }

    let window = BlockMatrixWindow {
        row_sizes: (0..=i_max).map(|i| model.phase_size(i)).collect(),
        col_sizes: (0..=j_max).map(|j| model.phase_size(j)).collect(),
        blocks: rows[..=i_max].to_vec(),
        horizon,
        horizon_tail_norm: tail_norm,
    };
    Ok(SecondMomentSolution {
        window,
        constants,
        stationary_weighted_diag: d,
    })
}

// ---------------------------------------------------------------------------
// Variance pipeline
// ---------------------------------------------------------------------------

/// Variance outputs over the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariancePipeline {
    /// `eta^(2)` partial sums per state.
    pub eta2_per_state: Vec<f64>,
    /// `V^(2) = eta^(2) - eta o eta` per state.
    pub v2_per_state: Vec<f64>,
    /// `pi V2^T` over the window.
    pub v2_stationary: f64,
    /// Inherited from the eta partial sums.
    pub divergence_flag: bool,
}

/// `L^(2) = M^(2) diag(pi)`, `eta^(2) = M^(2) pi^T` partials, the variance
/// vector and its stationary partial.
pub fn variance_pipeline(
    m: &BlockMatrixWindow,
    m2: &BlockMatrixWindow,
    pi: &StationaryWindow,
) -> (BlockMatrixWindow, VariancePipeline) {
    let l2 = mean_mixing_matrix(m2, pi);
    let eta = eta_vector(m, pi);
    let eta2 = eta_vector(m2, pi);
    let v2: Vec<f64> = eta2
        .per_state
        .iter()
        .zip(&eta.per_state)
        .map(|(s2, s1)| s2 - s1 * s1)
        .collect();
    let mut v2_stationary = 0.0;
    let mut off = 0usize;
    for i in 0..m.row_levels() {
        for r in 0..m.row_sizes[i] {
            v2_stationary += pi.prob(i, r) * v2[off + r];
        }
        off += m.row_sizes[i];
    }
    (
        l2,
        VariancePipeline {
            eta2_per_state: eta2.per_state,
            v2_per_state: v2,
            v2_stationary,
            divergence_flag: eta.divergence_flag,
        },
    )
}

/// Vector route for `eta^(2)` partials: sum the second-moment right side
/// against `pi` first (`W_i = sum_{j<=J} B2_{i,j} pi_j^T`), then run the
/// censored / resolvent / `(I - G_L)^{-1}` pipeline on the single column.
/// With the constants folded as `c = sum_j c0_j pi_j^T`, this matches
/// `M^(2) pi^T` up to independent truncation error.
pub fn eta2_via_vector_route(
    model: &QbdModel,
    f: &RgFactorization,
    pi: &StationaryWindow,
    window: (usize, usize),
    eps_tail: f64,
    m2: &SecondMomentSolution,
) -> Result<Vec<f64>> {
    let (i_max, j_max) = window;
    let mut mfpt = MfptSolver::new(model, f, pi, i_max, j_max, eps_tail)?;
    let d = &m2.stationary_weighted_diag;
    let mut d2 = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        let dinv = pi.diag_pi_inverse(j)?;
        let mj = model.phase_size(j);
        let mut scale = DMatrix::<f64>::identity(mj, mj);
        for ph in 0..mj {
            scale[(ph, ph)] += 2.0 * d[j][ph];
        }
        d2.push(dinv * scale);
    }
    let sigma: f64 = (0..=j_max).map(|j| pi.pi(j).sum()).sum();

    // Raw B2 rows contracted against pi over the column window.
    let b2v = |i: usize, mfpt: &mut MfptSolver| -> Result<DVector<f64>> {
        mfpt.ensure_rows(i + 1)?;
        let mi = model.phase_size(i);
        let mut out = DVector::<f64>::repeat(mi, sigma);
        for j in 0..=j_max {
            let pj = pi.pi(j).transpose();
            let mut lam = model.a1(i) * mfpt.block(i, j) * &pj;
            lam += model.a0(i) * mfpt.block(i + 1, j) * &pj;
            if i >= 1 {
                lam += model.a2(i) * mfpt.block(i - 1, j) * &pj;
            }
            out += 2.0 * lam;
            if let Some(p) = model.p_block(i, j) {
                out -= p * &d2[j] * &pj;
            }
        }
        Ok(out)
    };

    // C-transform of the vector rows.
    let mut w_rows = Vec::with_capacity(i_max + 1);
    for i in 0..=i_max {
        let mut acc = b2v(i, &mut mfpt)?;
        let mut x = f.r(i).clone();
        let mut k = 1usize;
        loop {
            let next = b2v(i + k, &mut mfpt)?;
            let bound = linalg::max_norm(&x) * next.amax();
            if bound < eps_tail {
                break;
            }
            if k >= SERIES_CAP {
                return Err(QbdError::Nonconvergence {
                    what: "eta2 vector-route series".into(),
                    iterations: SERIES_CAP,
                    residual: bound,
                });
            }
            acc += &x * next;
            x *= f.r(i + k);
            k += 1;
        }
        w_rows.push(acc);
    }

    // Censored level then the invertible diagonal, then (I - G_L)^{-1}.
    let shared = Shared::new(model, f, j_max + 1, eps_tail)?;
    let c_fold: f64 = m2
        .constants
        .iter()
        .enumerate()
        .map(|(j, c0)| (c0 * pi.pi(j).transpose())[0])
        .sum();
    let mut out_rows: Vec<DVector<f64>> = Vec::with_capacity(i_max + 1);
    for (i, w) in w_rows.iter().enumerate() {
        let mut row = if i == 0 {
            let g0 = DMatrix::from_column_slice(w.len(), 1, w.as_slice());
            let sol = poisson::solve_censored_with(&f.z, &f.v0, &g0)?;
            DVector::from_column_slice(sol.particular.as_slice()) + DVector::repeat(w.len(), c_fold)
        } else {
            shared.resolvent(i) * w
        };
        if i > 0 {
            row += f.g(i) * &out_rows[i - 1];
        }
        out_rows.push(row);
    }
    Ok(out_rows.iter().flat_map(|r| r.iter().copied()).collect())
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// Everything the mixing and variance subcommands report.
#[derive(Debug, Clone)]
pub struct MixingReport {
    pub m: BlockMatrixWindow,
    pub l: BlockMatrixWindow,
    pub eta: EtaVector,
    pub kemeny_censored: f64,
    pub kemeny_censored_2x2: Option<f64>,
    pub m2: BlockMatrixWindow,
    pub l2: BlockMatrixWindow,
    pub variance: VariancePipeline,
}

/// Run the full pipeline on one model.
pub fn mixing_report(
    model: &QbdModel,
    f: &RgFactorization,
    pi: &StationaryWindow,
    window: (usize, usize),
    eps_tail: f64,
    oracle_truncation: usize,
) -> Result<MixingReport> {
    let m = mean_first_passage(model, f, pi, window, eps_tail)?;
    let l = mean_mixing_matrix(&m, pi);
    let eta = eta_vector(&m, pi);
    let kc = kemeny_censored(f);
    let k2 = if f.u(0).nrows() >= 2 {
        Some(kemeny_censored_2x2(f, (0, 1))?)
    } else {
        None
    };
    let m2 = second_moment_first_passage(model, f, pi, window, eps_tail, oracle_truncation)?;
    let (l2, variance) = variance_pipeline(&m, &m2.window, pi);
    Ok(MixingReport {
        m,
        l,
        eta,
        kemeny_censored: kc,
        kemeny_censored_2x2: k2,
        m2: m2.window,
        l2,
        variance,
    })
}

// ---------------------------------------------------------------------------

fn hcat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::<f64>::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        for r in 0..rows {
            for c in 0..b.ncols() {
                out[(r, off + c)] = b[(r, c)];
            }
        }
        off += b.ncols();
    }
    out
}

fn split_row(row: &DMatrix<f64>, like: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(like.len());
    let mut off = 0;
    for b in like {
        out.push(DMatrix::from_fn(row.nrows(), b.ncols(), |r, c| {
            row[(r, off + c)]
        }));
        off += b.ncols();
    }
    out
}

fn add_outer(block: &mut DMatrix<f64>, col: &DVector<f64>, row: &RowDVector<f64>) {
    for r in 0..block.nrows() {
        for c in 0..block.ncols() {
            block[(r, c)] += col[r] * row[c];
        }
    }
}
