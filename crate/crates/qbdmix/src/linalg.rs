//! Small dense linear-algebra helpers shared across the crate.
//!
//! Blocks are desk-scale (phases <= ~32), so everything is dense LU with
//! partial pivoting via nalgebra.

use nalgebra::{DMatrix, DVector, RowDVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use crate::error::{QbdError, Result};

/// Entries below this are treated as structural zeros when building
/// reachability graphs.
pub const EDGE_EPS: f64 = 1e-15;

/// Max-norm (largest absolute entry) of a matrix; 0 for empty.
pub fn max_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()))
}

/// Solve `A X = B` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| QbdError::Singular {
        context: context.to_string(),
    })
}

/// Inverse of `A` by LU with partial pivoting.
pub fn inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| QbdError::Singular {
            context: context.to_string(),
        })
}

/// Spectral radius (largest eigenvalue modulus).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Unique probability row vector `v` with `v (I - P) = 0`, `v e = 1`, for an
/// irreducible stochastic `P`.
///
/// The rank-deficient system is closed by replacing one equation with the
/// normalization; for an irreducible stochastic matrix the resulting square
/// system is nonsingular.
pub fn stationary_row(p: &DMatrix<f64>, context: &str) -> Result<RowDVector<f64>> {
    let n = p.nrows();
    // Columns of (I - P): transpose so the unknown is a column vector.
    let mut a = DMatrix::<f64>::identity(n, n) - p.transpose();
    let mut rhs = DVector::<f64>::zeros(n);
    for j in 0..n {
        a[(0, j)] = 1.0;
    }
    rhs[0] = 1.0;
    let v = a.lu().solve(&rhs).ok_or_else(|| QbdError::Singular {
        context: context.to_string(),
    })?;
    let mut row = RowDVector::<f64>::zeros(n);
    for i in 0..n {
        // Tiny negative round-off is clamped; anything sizable is a bug in
        // the caller's irreducibility assumption.
        if v[i] < -1e-9 {
            return Err(QbdError::Singular {
                context: format!("{context}: stationary solve produced {}", v[i]),
            });
        }
        row[i] = v[i].max(0.0);
    }
    let s: f64 = row.iter().sum();
    row /= s;
    Ok(row)
}

/// True iff the directed graph of entries `> EDGE_EPS` is strongly connected.
pub fn strongly_connected(p: &DMatrix<f64>) -> bool {
    let n = p.nrows();
    if n == 0 {
        return false;
    }
    let mut g = DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if p[(i, j)] > EDGE_EPS {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    tarjan_scc(&g).len() == 1
}
