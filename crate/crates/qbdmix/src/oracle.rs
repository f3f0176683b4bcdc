//! Independent verification: dense finite-chain solvers (stationary vector,
//! mean first passage, absorbing-chain passage moments, Kemeny constant) and
//! a reproducible Monte Carlo path simulator.
//!
//! Nothing here goes through the RG-factorization; these are the oracles the
//! windowed computations are checked against.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QbdError, Result};
use crate::linalg;
use crate::model::{DenseChain, QbdModel};

/// Monte Carlo mean/variance estimate with 95% half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// `1.96 * sqrt(variance / paths)`.
    pub half_width_95: f64,
    /// 95% half-width for the variance estimate, from the sample's fourth
    /// central moment.
    pub variance_half_width_95: f64,
    pub paths: usize,
    pub seed: u64,
}

impl MomentEstimate {
    fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        let nf = n as f64;
        let mean = samples.iter().sum::<f64>() / nf;
        let (mut m2, mut m4) = (0.0_f64, 0.0_f64);
        for &x in samples {
            let d = x - mean;
            m2 += d * d;
            m4 += d * d * d * d;
        }
        let variance = if n > 1 { m2 / (nf - 1.0) } else { 0.0 };
        let m2n = m2 / nf;
        let m4n = m4 / nf;
        let var_of_var = ((m4n - m2n * m2n) / nf).max(0.0);
        MomentEstimate {
            mean,
            variance,
            half_width_95: 1.96 * (variance / nf).sqrt(),
            variance_half_width_95: 1.96 * var_of_var.sqrt(),
            paths: n,
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Dense solvers
// ---------------------------------------------------------------------------

/// Stationary probability vector of an irreducible dense chain.
pub fn dense_stationary(chain: &DenseChain) -> Result<RowDVector<f64>> {
    if !linalg::strongly_connected(&chain.p) {
        return Err(QbdError::Reducible {
            context: "dense chain".into(),
        });
    }
    linalg::stationary_row(&chain.p, "dense stationary vector")
}

/// Fundamental matrix `(I - P + e pi)^{-1}` of the full dense chain.
pub fn dense_fundamental(chain: &DenseChain) -> Result<DMatrix<f64>> {
    let pi = dense_stationary(chain)?;
    let n = chain.p.nrows();
    let e = DVector::<f64>::repeat(n, 1.0);
    linalg::inverse(
        &(DMatrix::identity(n, n) - &chain.p + &e * &pi),
        "dense fundamental matrix",
    )
}

/// Mean-first-passage matrix through the Kemeny-Snell route:
/// `M = (I - Z + E diag(Z)) diag(pi)^{-1}`, so diagonal entries are mean
/// return times `1/pi_j`.
pub fn dense_mfpt(chain: &DenseChain) -> Result<DMatrix<f64>> {
    let pi = dense_stationary(chain)?;
    let z = dense_fundamental(chain)?;
    let n = chain.p.nrows();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let num = if i == j { 1.0 } else { z[(j, j)] - z[(i, j)] };
            m[(i, j)] = num / pi[j];
        }
    }
    Ok(m)
}

/// First and second moments of the first-passage time to `target`.
///
/// Off-target entries solve the absorbing (taboo) systems
/// `(I - T) m1 = e` and `(I - T) m2 = e + 2 T m1` over the non-target
/// states; the target entry is the return-time moment assembled by one-step
/// conditioning on the target row.
pub fn dense_passage_moments(
    chain: &DenseChain,
    target: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = chain.p.nrows();
    if target >= n {
        return Err(QbdError::Argument(format!(
            "target {target} out of range for {n} states"
        )));
    }
    let rest: Vec<usize> = (0..n).filter(|&s| s != target).collect();
    let nr = rest.len();
    let mut t = DMatrix::<f64>::zeros(nr, nr);
    for (ri, &i) in rest.iter().enumerate() {
        for (rj, &j) in rest.iter().enumerate() {
            t[(ri, rj)] = chain.p[(i, j)];
        }
    }
    let eye = DMatrix::<f64>::identity(nr, nr);
    let lu = (&eye - &t).lu();
    let e = DVector::<f64>::repeat(nr, 1.0);
    let m1_rest = lu.solve(&e).ok_or_else(|| QbdError::Singular {
        context: "taboo first-moment solve".into(),
    })?;
    let rhs2 = &e + 2.0 * &t * &m1_rest;
    let m2_rest = lu.solve(&rhs2).ok_or_else(|| QbdError::Singular {
        context: "taboo second-moment solve".into(),
    })?;

    let mut m1 = DVector::<f64>::zeros(n);
    let mut m2 = DVector::<f64>::zeros(n);
    for (ri, &i) in rest.iter().enumerate() {
        m1[i] = m1_rest[ri];
        m2[i] = m2_rest[ri];
    }
    let mut ret1 = 1.0;
    let mut ret2 = 1.0;
    for (ri, &r) in rest.iter().enumerate() {
        let p = chain.p[(target, r)];
        ret1 += p * m1_rest[ri];
        ret2 += p * (2.0 * m1_rest[ri] + m2_rest[ri]);
    }
    m1[target] = ret1;
    m2[target] = ret2;
    Ok((m1, m2))
}

/// Kemeny constant of a finite chain plus its constancy check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DenseKemeny {
    /// `trace((I - P + e pi)^{-1})`.
    pub trace: f64,
    /// `max_i |sum_j m_ij pi_j - trace|`; ~0 because the row sums of
    /// `M diag(pi)` are constant on a finite chain.
    pub constancy_deviation: f64,
}

pub fn dense_kemeny(chain: &DenseChain) -> Result<DenseKemeny> {
    let z = dense_fundamental(chain)?;
    let trace = z.trace();
    let pi = dense_stationary(chain)?;
    let m = dense_mfpt(chain)?;
    let mut deviation = 0.0_f64;
    for i in 0..m.nrows() {
        let k: f64 = (0..m.ncols()).map(|j| m[(i, j)] * pi[j]).sum();
        deviation = deviation.max((k - trace).abs());
    }
    Ok(DenseKemeny {
        trace,
        constancy_deviation: deviation,
    })
}

// ---------------------------------------------------------------------------
// Path simulation
// ---------------------------------------------------------------------------

/// One independent ChaCha stream per (seed, path index): reproducible and
/// order-independent, so paths can run in parallel.
fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Per-level sampling table for walking the infinite QBD directly.
struct QbdSampler {
    n_star: usize,
    /// For level `k <= N*`: cumulative row probabilities over
    /// `[down | stay | up]` sections (down absent at level 0).
    tables: Vec<Vec<Vec<f64>>>,
    /// Section sizes `(m_down, m_stay)` per level `k <= N*`.
    sections: Vec<(usize, usize)>,
}

impl QbdSampler {
    fn new(model: &QbdModel) -> Self {
        let n_star = model.inhomogeneity_bound();
        let mut tables = Vec::with_capacity(n_star + 1);
        let mut sections = Vec::with_capacity(n_star + 1);
        for k in 0..=n_star {
            let m_down = if k == 0 { 0 } else { model.phase_size(k - 1) };
            let m_stay = model.phase_size(k);
            let mut rows = Vec::with_capacity(m_stay);
            for r in 0..m_stay {
                let mut cum = Vec::new();
                let mut acc = 0.0;
                if k >= 1 {
                    let a2 = model.a2(k);
                    for c in 0..a2.ncols() {
                        acc += a2[(r, c)];
                        cum.push(acc);
                    }
                }
                let a1 = model.a1(k);
                for c in 0..a1.ncols() {
                    acc += a1[(r, c)];
                    cum.push(acc);
                }
                let a0 = model.a0(k);
                for c in 0..a0.ncols() {
                    acc += a0[(r, c)];
                    cum.push(acc);
                }
                rows.push(cum);
            }
            tables.push(rows);
            sections.push((m_down, m_stay));
        }
        QbdSampler {
            n_star,
            tables,
            sections,
        }
    }

    #[inline]
    fn step(&self, state: (usize, usize), u: f64) -> (usize, usize) {
        let (level, phase) = state;
        let t = level.min(self.n_star);
        let cum = &self.tables[t][phase];
        let (m_down, m_stay) = self.sections[t];
        let mut idx = cum.len() - 1;
        for (i, &c) in cum.iter().enumerate() {
            if u < c {
                idx = i;
                break;
            }
        }
        let down_len = if level >= 1 { m_down } else { 0 };
        if idx < down_len {
            (level - 1, idx)
        } else if idx < down_len + m_stay {
            (level, idx - down_len)
        } else {
            (level + 1, idx - down_len - m_stay)
        }
    }
}

fn summarize_paths(
    results: Vec<Option<f64>>,
    paths: usize,
    seed: u64,
    cap: u64,
) -> Result<MomentEstimate> {
    let capped = results.iter().filter(|r| r.is_none()).count();
    if capped > 0 {
        return Err(QbdError::CapExceeded {
            count: capped,
            paths,
            cap,
        });
    }
    let samples: Vec<f64> = results.into_iter().flatten().collect();
    Ok(MomentEstimate::from_samples(&samples, seed))
}

/// First-passage time `from -> to` (`n >= 1`; at `from == to` this is the
/// return time) simulated on the infinite QBD itself, so there is no
/// truncation bias.
pub fn simulate_passage_model(
    model: &QbdModel,
    from: (usize, usize),
    to: (usize, usize),
    paths: usize,
    seed: u64,
    cap: u64,
) -> Result<MomentEstimate> {
    if paths < 100 {
        return Err(QbdError::Argument("need at least 100 paths".into()));
    }
    let sampler = QbdSampler::new(model);
    let results: Vec<Option<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut state = from;
            for n in 1..=cap {
                state = sampler.step(state, rng.gen::<f64>());
                if state == to {
                    return Some(n as f64);
                }
            }
            None
        })
        .collect();
    summarize_paths(results, paths, seed, cap)
}

/// Same contract as [`simulate_passage_model`], walking a dense chain.
pub fn simulate_passage_dense(
    chain: &DenseChain,
    from: usize,
    to: usize,
    paths: usize,
    seed: u64,
    cap: u64,
) -> Result<MomentEstimate> {
    if paths < 100 {
        return Err(QbdError::Argument("need at least 100 paths".into()));
    }
    let cum = dense_cumulative(&chain.p);
    let results: Vec<Option<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut state = from;
            for n in 1..=cap {
                state = sample_row(&cum[state], rng.gen::<f64>());
                if state == to {
                    return Some(n as f64);
                }
            }
            None
        })
        .collect();
    summarize_paths(results, paths, seed, cap)
}

/// Mixing time `T = min{ n >= 0 : X_n = Y }` with the start and the target
/// `Y` drawn independently from the stationary distribution (`T = 0` when
/// the start already equals the target).
pub fn simulate_mixing(
    chain: &DenseChain,
    paths: usize,
    seed: u64,
    cap: u64,
) -> Result<MomentEstimate> {
    if paths < 100 {
        return Err(QbdError::Argument("need at least 100 paths".into()));
    }
    let pi = dense_stationary(chain)?;
    let mut pi_cum = Vec::with_capacity(pi.len());
    let mut acc = 0.0;
    for &x in pi.iter() {
        acc += x;
        pi_cum.push(acc);
    }
    let cum = dense_cumulative(&chain.p);
    let results: Vec<Option<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut state = sample_row(&pi_cum, rng.gen::<f64>());
            let target = sample_row(&pi_cum, rng.gen::<f64>());
            if state == target {
                return Some(0.0);
            }
            for n in 1..=cap {
                state = sample_row(&cum[state], rng.gen::<f64>());
                if state == target {
                    return Some(n as f64);
                }
            }
            None
        })
        .collect();
    summarize_paths(results, paths, seed, cap)
}

fn dense_cumulative(p: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..p.nrows())
        .map(|r| {
            let mut acc = 0.0;
            (0..p.ncols())
                .map(|c| {
                    acc += p[(r, c)];
                    acc
                })
                .collect()
        })
        .collect()
}

#[inline]
fn sample_row(cum: &[f64], u: f64) -> usize {
    for (i, &c) in cum.iter().enumerate() {
        if u < c {
            return i;
        }
    }
    cum.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{birth_death, random_model, truncate_dense, BoundaryPolicy};
    use approx::assert_abs_diff_eq;

    fn two_state(a: f64, b: f64) -> DenseChain {
        DenseChain {
            states: vec![(0, 0), (0, 1)],
            p: DMatrix::from_row_slice(2, 2, &[1.0 - a, a, b, 1.0 - b]),
            truncation_level: 0,
            boundary_policy: BoundaryPolicy::ReflectToA1,
        }
    }

    #[test]
    fn dense_stationary_examples() {
        let pi = dense_stationary(&two_state(0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-12);

        let model = birth_death(0.2, 0.4).unwrap();
        let chain = truncate_dense(&model, 30, BoundaryPolicy::ReflectToA1).unwrap();
        let pi = dense_stationary(&chain).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn dense_mfpt_two_state_and_bd() {
        let m = dense_mfpt(&two_state(0.5, 0.5)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(m[(i, j)], 2.0, epsilon = 1e-12);
            }
        }

        let model = birth_death(0.2, 0.4).unwrap();
        let chain = truncate_dense(&model, 30, BoundaryPolicy::ReflectToA1).unwrap();
        let m = dense_mfpt(&chain).unwrap();
        assert_abs_diff_eq!(m[(0, 1)], 5.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m[(1, 0)], 5.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m[(0, 0)], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m[(1, 1)], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn dense_mfpt_satisfies_defining_equation() {
        let model = random_model(3, 3, 7).unwrap();
        let chain = truncate_dense(&model, 12, BoundaryPolicy::ReflectToA1).unwrap();
        let pi = dense_stationary(&chain).unwrap();
        let m = dense_mfpt(&chain).unwrap();
        let n = chain.p.nrows();
        let e = DMatrix::<f64>::repeat(n, n, 1.0);
        let mut dinv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            dinv[(j, j)] = 1.0 / pi[j];
        }
        let lhs = (DMatrix::identity(n, n) - &chain.p) * &m;
        let rhs = e - &chain.p * dinv;
        // diag(pi)^{-1} entries reach ~1/pi_min, so the check is relative to
        // the right side's magnitude.
        let scale = 1.0 + linalg::max_norm(&rhs);
        assert!(linalg::max_norm(&(lhs - rhs)) <= 1e-9 * scale);
    }

    #[test]
    fn passage_moments_two_state() {
        let (m1, m2) = dense_passage_moments(&two_state(0.5, 0.5), 0).unwrap();
        assert_abs_diff_eq!(m1[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m2[1], 6.0, epsilon = 1e-12);
        // Return moments at the target by one-step conditioning.
        assert_abs_diff_eq!(m1[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m2[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn passage_moments_bd_geometric() {
        let model = birth_death(0.2, 0.4).unwrap();
        let chain = truncate_dense(&model, 30, BoundaryPolicy::ReflectToA1).unwrap();
        let target = chain.state_index(1, 0).unwrap();
        let (m1, m2) = dense_passage_moments(&chain, target).unwrap();
        let from = chain.state_index(0, 0).unwrap();
        assert_abs_diff_eq!(m1[from], 5.0, epsilon = 1e-8);
        assert_abs_diff_eq!(m2[from], 45.0, epsilon = 1e-7);
        // Jensen entrywise.
        for i in 0..m1.len() {
            assert!(m2[i] + 1e-9 >= m1[i] * m1[i]);
        }
    }

    #[test]
    fn dense_second_moment_mixing_arithmetic() {
        // 2-state a = b = 0.5: every first-passage/return time is
        // geometric(0.5), so m2 = 6 everywhere, eta2 per state = 6,
        // V2 = eta2 - eta^2 = 6 - 4 = 2 and v2 = pi V2 = 2.
        let chain = two_state(0.5, 0.5);
        let pi = dense_stationary(&chain).unwrap();
        let m = dense_mfpt(&chain).unwrap();
        let mut eta = [0.0_f64; 2];
        let mut eta2 = [0.0_f64; 2];
        for i in 0..2 {
            for j in 0..2 {
                let (_, m2) = dense_passage_moments(&chain, j).unwrap();
                eta[i] += m[(i, j)] * pi[j];
                eta2[i] += m2[i] * pi[j];
            }
        }
        let mut v2_mix = 0.0;
        for i in 0..2 {
            assert_abs_diff_eq!(eta[i], 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(eta2[i], 6.0, epsilon = 1e-12);
            v2_mix += pi[i] * (eta2[i] - eta[i] * eta[i]);
        }
        assert_abs_diff_eq!(v2_mix, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn dense_kemeny_examples() {
        let k = dense_kemeny(&two_state(0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(k.trace, 2.0, epsilon = 1e-12);
        assert!(k.constancy_deviation <= 1e-12);

        let k = dense_kemeny(&two_state(0.2, 0.3)).unwrap();
        assert_abs_diff_eq!(k.trace, 3.0, epsilon = 1e-12);

        let model = random_model(3, 3, 7).unwrap();
        let chain = truncate_dense(&model, 15, BoundaryPolicy::ReflectToA1).unwrap();
        let k = dense_kemeny(&chain).unwrap();
        assert!(k.constancy_deviation <= 1e-8);
    }

    #[test]
    fn simulate_passage_bd_hits_geometric_moments() {
        let model = birth_death(0.2, 0.4).unwrap();
        let est = simulate_passage_model(&model, (0, 0), (1, 0), 200_000, 1, 10_000_000).unwrap();
        assert!(
            (est.mean - 5.0).abs() <= 3.0 * est.half_width_95,
            "mean {} hw {}",
            est.mean,
            est.half_width_95
        );
        assert!(
            (est.variance - 20.0).abs() <= 3.0 * est.variance_half_width_95,
            "variance {} hw {}",
            est.variance,
            est.variance_half_width_95
        );
    }

    #[test]
    fn simulate_return_time_matches_inverse_pi() {
        let model = birth_death(0.2, 0.4).unwrap();
        let est = simulate_passage_model(&model, (0, 0), (0, 0), 200_000, 3, 10_000_000).unwrap();
        assert!((est.mean - 2.0).abs() <= 3.0 * est.half_width_95);
    }

    #[test]
    fn simulation_is_bit_deterministic_per_seed() {
        let model = birth_death(0.2, 0.4).unwrap();
        let a = simulate_passage_model(&model, (0, 0), (1, 0), 5_000, 42, 1_000_000).unwrap();
        let b = simulate_passage_model(&model, (0, 0), (1, 0), 5_000, 42, 1_000_000).unwrap();
        assert_eq!(a, b);
        let c = simulate_passage_model(&model, (0, 0), (1, 0), 5_000, 43, 1_000_000).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn dense_walk_agrees_with_model_walk() {
        let model = birth_death(0.2, 0.4).unwrap();
        let chain = truncate_dense(&model, 40, BoundaryPolicy::ReflectToA1).unwrap();
        let dense = simulate_passage_dense(&chain, 0, 1, 50_000, 11, 1_000_000).unwrap();
        assert!((dense.mean - 5.0).abs() <= 3.0 * dense.half_width_95);
    }

    #[test]
    fn simulate_mixing_two_state() {
        let est = simulate_mixing(&two_state(0.5, 0.5), 200_000, 7, 1_000_000).unwrap();
        // E[T] = sum over (start, target) pairs: 2 * (0.25 * 2) = 1.
        assert!((est.mean - 1.0).abs() <= 3.0 * est.half_width_95);
    }

    #[test]
    fn simulate_mixing_bridges_to_mfpt_with_zero_diagonal() {
        // The simulator counts T = 0 on an immediate hit; M's diagonal is
        // the return time. Zeroing the diagonal bridges the conventions:
        // E[T] = sum_{i,j} pi_i pi_j m*_ij with m*_ii = 0.
        let model = birth_death(0.2, 0.4).unwrap();
        let chain = truncate_dense(&model, 12, BoundaryPolicy::ReflectToA1).unwrap();
        let pi = dense_stationary(&chain).unwrap();
        let m = dense_mfpt(&chain).unwrap();
        let mut analytic = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j {
                    analytic += pi[i] * m[(i, j)] * pi[j];
                }
            }
        }
        let est = simulate_mixing(&chain, 200_000, 13, 1_000_000).unwrap();
        assert!(
            (est.mean - analytic).abs() <= 3.0 * est.half_width_95,
            "sim {} vs analytic {analytic}",
            est.mean
        );
    }

    #[test]
    fn simulate_mixing_single_state_is_zero() {
        let chain = DenseChain {
            states: vec![(0, 0)],
            p: DMatrix::from_element(1, 1, 1.0),
            truncation_level: 0,
            boundary_policy: BoundaryPolicy::ReflectToA1,
        };
        let est = simulate_mixing(&chain, 1_000, 5, 100).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.variance, 0.0);
    }

    #[test]
    fn cap_exceeded_is_reported_with_count() {
        let model = birth_death(0.2, 0.4).unwrap();
        let err = simulate_passage_model(&model, (0, 0), (5, 0), 100, 1, 3).unwrap_err();
        match err {
            QbdError::CapExceeded { count, paths, cap } => {
                assert_eq!(paths, 100);
                assert_eq!(cap, 3);
                assert!(count > 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
