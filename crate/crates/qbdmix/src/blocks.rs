//! Finite windows of infinite block matrices.

use nalgebra::DMatrix;

/// A dense `(I_max+1) x (J_max+1)` grid of blocks representing a window of an
/// infinite block matrix, plus the truncation metadata of the series that
/// produced it.
#[derive(Debug, Clone)]
pub struct BlockMatrixWindow {
    /// Phase count per row level.
    pub row_sizes: Vec<usize>,
    /// Phase count per column level.
    pub col_sizes: Vec<usize>,
    /// `blocks[i][j]` has shape `row_sizes[i] x col_sizes[j]`.
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    /// Largest tail-sum cutoff used while assembling the window (0 when every
    /// entry came from a closed form).
    pub horizon: usize,
    /// Max-norm bound of the first omitted series term.
    pub horizon_tail_norm: f64,
}

impl BlockMatrixWindow {
    /// Zero window with the given shapes.
    pub fn zeros(row_sizes: Vec<usize>, col_sizes: Vec<usize>) -> Self {
        let blocks = row_sizes
            .iter()
            .map(|&r| col_sizes.iter().map(|&c| DMatrix::zeros(r, c)).collect())
            .collect();
        BlockMatrixWindow {
            row_sizes,
            col_sizes,
            blocks,
            horizon: 0,
            horizon_tail_norm: 0.0,
        }
    }

    /// Identity window (square blocks on the diagonal where shapes allow).
    pub fn identity(sizes: Vec<usize>) -> Self {
        let mut w = Self::zeros(sizes.clone(), sizes);
        for i in 0..w.blocks.len() {
            let n = w.row_sizes[i];
            w.blocks[i][i] = DMatrix::identity(n, n);
        }
        w
    }

    pub fn row_levels(&self) -> usize {
        self.row_sizes.len()
    }

    pub fn col_levels(&self) -> usize {
        self.col_sizes.len()
    }

    pub fn block(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.blocks[i][j]
    }

    /// Entry addressed by `(level, phase)` pairs.
    pub fn entry(&self, row: (usize, usize), col: (usize, usize)) -> f64 {
        self.blocks[row.0][col.0][(row.1, col.1)]
    }

    /// Largest absolute entry across the whole window.
    pub fn max_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .fold(0.0_f64, |acc, &x| acc.max(x.abs()))
    }

    /// Largest absolute entrywise difference; windows must be same-shaped.
    pub fn max_diff(&self, other: &BlockMatrixWindow) -> f64 {
        assert_eq!(self.row_sizes, other.row_sizes);
        assert_eq!(self.col_sizes, other.col_sizes);
        let mut d = 0.0_f64;
        for (ri, rj) in self.blocks.iter().zip(&other.blocks) {
            for (a, b) in ri.iter().zip(rj) {
                for (x, y) in a.iter().zip(b.iter()) {
                    d = d.max((x - y).abs());
                }
            }
        }
        d
    }

    /// Assemble the window into one dense matrix (row levels stacked).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let nr: usize = self.row_sizes.iter().sum();
        let nc: usize = self.col_sizes.iter().sum();
        let mut out = DMatrix::zeros(nr, nc);
        let mut ro = 0;
        for (i, &rs) in self.row_sizes.iter().enumerate() {
            let mut co = 0;
            for (j, &cs) in self.col_sizes.iter().enumerate() {
                let b = &self.blocks[i][j];
                for r in 0..rs {
                    for c in 0..cs {
                        out[(ro + r, co + c)] = b[(r, c)];
                    }
                }
                co += cs;
            }
            ro += rs;
        }
        out
    }
}

/// Row-block source for the series `(I - R_U)^{-1} B`: supplies `B`'s block
/// in row level `i`, column level `j`, for any `i` up to the horizon the
/// series needs.
pub trait BlockRows {
    /// Block of shape `row_phase(i) x col_phase(j)`.
    fn block(&self, i: usize, j: usize) -> DMatrix<f64>;

    /// Upper bound on the max-norm of any block in row level `i` (over the
    /// column window). Drives series truncation; must not under-report.
    fn row_norm_bound(&self, i: usize) -> f64;
}

impl BlockMatrixWindow {
    /// View the window as a row source: rows beyond the window read as zero.
    pub fn as_rows(&self) -> WindowRows<'_> {
        WindowRows {
            window: self,
            bound: self.max_norm(),
        }
    }
}

/// [`BlockRows`] adapter over a finite window.
///
/// The reported bound is the window-global max-norm for every in-support
/// row (and 0 past the support), so the series truncation cannot stop early
/// on a sparse row with nonzero rows behind it.
pub struct WindowRows<'a> {
    window: &'a BlockMatrixWindow,
    bound: f64,
}

impl BlockRows for WindowRows<'_> {
    fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let w = self.window;
        if i < w.row_levels() && j < w.col_levels() {
            w.blocks[i][j].clone()
        } else {
            let r = *w.row_sizes.get(i).unwrap_or(w.row_sizes.last().unwrap());
            let c = *w.col_sizes.get(j).unwrap_or(w.col_sizes.last().unwrap());
            DMatrix::zeros(r, c)
        }
    }

    fn row_norm_bound(&self, i: usize) -> f64 {
        if i >= self.window.row_levels() {
            0.0
        } else {
            self.bound
        }
    }
}
