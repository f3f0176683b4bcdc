//! Level-dependent QBD transition structures: representation, validation,
//! file ingestion and built-in fixtures.
//!
//! A chain is stored as a finite inhomogeneous prefix (levels `0..N*`) plus a
//! level-independent tail reused for every level `>= N*`. The backward
//! recursions in [`crate::factorization`] terminate on such a model while
//! still exercising the level-dependent equations on the prefix.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QbdError, Result};
use crate::linalg;

/// Absolute tolerance on row sums; inputs beyond it are rejected, never
/// renormalized.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A discrete-time level-dependent QBD transition structure.
///
/// Level `k` has `phase_size(k)` phases; blocks `A2/A1/A0` move the level
/// down / keep it / move it up. Levels `>= inhomogeneity_bound` share the
/// square `tail` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct QbdModel {
    phase_sizes: Vec<usize>,
    boundary_a1: DMatrix<f64>,
    boundary_a0: DMatrix<f64>,
    level_blocks: Vec<LevelBlocks>,
    tail: LevelBlocks,
    inhomogeneity_bound: usize,
}

/// The `(A2, A1, A0)` triple of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBlocks {
    pub a2: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a0: DMatrix<f64>,
}

/// Outcome of [`validate`]: `ok` iff `violations` is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// One validation violation, pinned to a level and row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub level: usize,
    pub row: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RowSum,
    Negative,
    EntryAboveOne,
    ZeroBlock,
    Reducible,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return write!(f, "ok");
        }
        write!(f, "{} violation(s):", self.violations.len())?;
        for v in self.violations.iter().take(8) {
            write!(
                f,
                " [{:?} level {} row {} magnitude {:.3e}]",
                v.kind, v.level, v.row, v.magnitude
            )?;
        }
        if self.violations.len() > 8 {
            write!(f, " ...")?;
        }
        Ok(())
    }
}

/// How [`truncate_dense`] closes the chain at the last level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Fold the upward block into the diagonal one: `A1 + A0`.
    ReflectToA1,
    /// Drop the upward block and renormalize each row.
    RenormalizeRows,
}

/// Finite truncation of the infinite chain, used as the oracle substrate.
#[derive(Debug, Clone)]
pub struct DenseChain {
    /// `(level, phase)` label per dense state index.
    pub states: Vec<(usize, usize)>,
    /// Dense stochastic transition matrix.
    pub p: DMatrix<f64>,
    pub truncation_level: usize,
    pub boundary_policy: BoundaryPolicy,
}

impl DenseChain {
    /// Dense index of `(level, phase)`.
    pub fn state_index(&self, level: usize, phase: usize) -> Option<usize> {
        self.states.iter().position(|&s| s == (level, phase))
    }
}

impl QbdModel {
    /// Build a model from raw parts, checking block shapes only.
    ///
    /// Stochasticity and irreducibility are checked by [`validate`].
    pub fn new(
        phase_sizes: Vec<usize>,
        boundary_a1: DMatrix<f64>,
        boundary_a0: DMatrix<f64>,
        level_blocks: Vec<LevelBlocks>,
        tail: LevelBlocks,
    ) -> Result<Self> {
        let n_star = phase_sizes.len().checked_sub(1).ok_or_else(|| {
            QbdError::Argument("phase_sizes must list m_0..m_{N*} (at least two entries)".into())
        })?;
        if n_star == 0 {
            return Err(QbdError::Argument(
                "inhomogeneity bound N* must be >= 1".into(),
            ));
        }
        if phase_sizes.iter().any(|&m| m == 0) {
            return Err(QbdError::Argument("phase sizes must be positive".into()));
        }
        if level_blocks.len() != n_star - 1 {
            return Err(QbdError::Argument(format!(
                "expected {} level block triples for N* = {}, got {}",
                n_star - 1,
                n_star,
                level_blocks.len()
            )));
        }
        let model = QbdModel {
            phase_sizes,
            boundary_a1,
            boundary_a0,
            level_blocks,
            tail,
            inhomogeneity_bound: n_star,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let m = |k: usize| self.phase_size(k);
        let expect = |lvl: usize, name: &str, b: &DMatrix<f64>, r: usize, c: usize| {
            if b.nrows() != r || b.ncols() != c {
                Err(QbdError::Dimension {
                    level: lvl,
                    detail: format!("{name} is {}x{}, expected {r}x{c}", b.nrows(), b.ncols()),
                })
            } else {
                Ok(())
            }
        };
        expect(0, "boundary A1", &self.boundary_a1, m(0), m(0))?;
        expect(0, "boundary A0", &self.boundary_a0, m(0), m(1))?;
        for (idx, lb) in self.level_blocks.iter().enumerate() {
            let k = idx + 1;
            expect(k, "A2", &lb.a2, m(k), m(k - 1))?;
            expect(k, "A1", &lb.a1, m(k), m(k))?;
            expect(k, "A0", &lb.a0, m(k), m(k + 1))?;
        }
        let n = self.inhomogeneity_bound;
        let mt = m(n);
        expect(n, "tail A2", &self.tail.a2, mt, mt)?;
        expect(n, "tail A1", &self.tail.a1, mt, mt)?;
        expect(n, "tail A0", &self.tail.a0, mt, mt)?;
        // The square tail A2 is used at level N*, mapping onto level N*-1.
        if self.phase_size(n - 1) != mt {
            return Err(QbdError::Dimension {
                level: n,
                detail: format!(
                    "tail blocks are {mt}x{mt} but level {} has {} phases; \
                     m_{{N*-1}} must equal m_{{N*}}",
                    n - 1,
                    self.phase_size(n - 1)
                ),
            });
        }
        Ok(())
    }

    /// First level of the homogeneous tail, `N*`.
    pub fn inhomogeneity_bound(&self) -> usize {
        self.inhomogeneity_bound
    }

    /// Number of phases at level `k` (levels past `N*` reuse `m_{N*}`).
    pub fn phase_size(&self, level: usize) -> usize {
        self.phase_sizes[level.min(self.inhomogeneity_bound)]
    }

    pub fn phase_sizes(&self) -> &[usize] {
        &self.phase_sizes
    }

    pub fn tail(&self) -> &LevelBlocks {
        &self.tail
    }

    /// Local (stay) block of level `k`.
    pub fn a1(&self, level: usize) -> &DMatrix<f64> {
        if level == 0 {
            &self.boundary_a1
        } else if level < self.inhomogeneity_bound {
            &self.level_blocks[level - 1].a1
        } else {
            &self.tail.a1
        }
    }

    /// Upward block of level `k`.
    pub fn a0(&self, level: usize) -> &DMatrix<f64> {
        if level == 0 {
            &self.boundary_a0
        } else if level < self.inhomogeneity_bound {
            &self.level_blocks[level - 1].a0
        } else {
            &self.tail.a0
        }
    }

    /// Downward block of level `k >= 1`.
    pub fn a2(&self, level: usize) -> &DMatrix<f64> {
        assert!(level >= 1, "A2 is defined for levels >= 1");
        if level < self.inhomogeneity_bound {
            &self.level_blocks[level - 1].a2
        } else {
            &self.tail.a2
        }
    }

    /// The `P` block in block row `i`, block column `j` (zero off the
    /// tridiagonal band).
    pub fn p_block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        if j == i {
            Some(self.a1(i))
        } else if j == i + 1 {
            Some(self.a0(i))
        } else if i >= 1 && j + 1 == i {
            Some(self.a2(i))
        } else {
            None
        }
    }
}

/// Check stochasticity, nonnegativity, block support and irreducibility.
///
/// Irreducibility is checked as strong connectivity of the dense truncation
/// at `N = N* + 2`, which sees every distinct block at least once.
pub fn validate(model: &QbdModel) -> ValidationReport {
    let mut violations = Vec::new();
    let n_star = model.inhomogeneity_bound();

    let mut check_entries = |level: usize, blocks: Vec<&DMatrix<f64>>| {
        let rows = blocks[0].nrows();
        for r in 0..rows {
            let mut sum = 0.0;
            for b in &blocks {
                for c in 0..b.ncols() {
                    let x = b[(r, c)];
                    sum += x;
                    if x < 0.0 {
                        violations.push(Violation {
                            kind: ViolationKind::Negative,
                            level,
                            row: r,
                            magnitude: -x,
                        });
                    } else if x > 1.0 {
                        violations.push(Violation {
                            kind: ViolationKind::EntryAboveOne,
                            level,
                            row: r,
                            magnitude: x - 1.0,
                        });
                    }
                }
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                violations.push(Violation {
                    kind: ViolationKind::RowSum,
                    level,
                    row: r,
                    magnitude: (sum - 1.0).abs(),
                });
            }
        }
    };

    check_entries(0, vec![model.a1(0), model.a0(0)]);
    for k in 1..=n_star {
        check_entries(k, vec![model.a2(k), model.a1(k), model.a0(k)]);
    }

    // A0 and A2 blocks must be nonnegative and not identically zero.
    let mut check_nonzero = |level: usize, name: &DMatrix<f64>| {
        if name.iter().all(|&x| x.abs() <= linalg::EDGE_EPS) {
            violations.push(Violation {
                kind: ViolationKind::ZeroBlock,
                level,
                row: 0,
                magnitude: 0.0,
            });
        }
    };
    check_nonzero(0, model.a0(0));
    for k in 1..=n_star {
        check_nonzero(k, model.a0(k));
        check_nonzero(k, model.a2(k));
    }

    if violations.is_empty() {
        // Only meaningful once the blocks are stochastic.
        if let Ok(chain) = assemble_dense(model, n_star + 2, BoundaryPolicy::ReflectToA1) {
            if !linalg::strongly_connected(&chain.p) {
                violations.push(Violation {
                    kind: ViolationKind::Reducible,
                    level: 0,
                    row: 0,
                    magnitude: 0.0,
                });
            }
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}

fn assemble_dense(model: &QbdModel, n: usize, policy: BoundaryPolicy) -> Result<DenseChain> {
    let mut states = Vec::new();
    let mut offsets = Vec::with_capacity(n + 2);
    let mut total = 0usize;
    for k in 0..=n {
        offsets.push(total);
        for ph in 0..model.phase_size(k) {
            states.push((k, ph));
        }
        total += model.phase_size(k);
    }
    offsets.push(total);

    let mut p = DMatrix::<f64>::zeros(total, total);
    let put = |p: &mut DMatrix<f64>, i: usize, j: usize, b: &DMatrix<f64>| {
        let (ri, cj) = (offsets[i], offsets[j]);
        for r in 0..b.nrows() {
            for c in 0..b.ncols() {
                p[(ri + r, cj + c)] += b[(r, c)];
            }
        }
    };

    for k in 0..=n {
        if k >= 1 {
            put(&mut p, k, k - 1, model.a2(k));
        }
        put(&mut p, k, k, model.a1(k));
        if k < n {
            put(&mut p, k, k + 1, model.a0(k));
        }
    }
    match policy {
        BoundaryPolicy::ReflectToA1 => {
            // A0 at the last level maps m_n x m_{n+1} with n >= N*, so both
            // phase counts equal m_{N*} and the fold is square.
            put(&mut p, n, n, model.a0(n));
        }
        BoundaryPolicy::RenormalizeRows => {
            for r in offsets[n]..total {
                let s: f64 = p.row(r).sum();
                if s <= 0.0 {
                    return Err(QbdError::Singular {
                        context: format!("renormalize_rows: zero row {r} at truncation"),
                    });
                }
                for c in 0..total {
                    p[(r, c)] /= s;
                }
            }
        }
    }

    Ok(DenseChain {
        states,
        p,
        truncation_level: n,
        boundary_policy: policy,
    })
}

/// Assemble the finite block-tridiagonal chain over levels `0..=n`.
pub fn truncate_dense(model: &QbdModel, n: usize, policy: BoundaryPolicy) -> Result<DenseChain> {
    if n < model.inhomogeneity_bound() {
        return Err(QbdError::Argument(format!(
            "truncation level {n} must be >= N* = {}",
            model.inhomogeneity_bound()
        )));
    }
    let chain = assemble_dense(model, n, policy)?;
    if !linalg::strongly_connected(&chain.p) {
        return Err(QbdError::Reducible {
            context: format!("dense truncation at N = {n}"),
        });
    }
    Ok(chain)
}

// ---------------------------------------------------------------------------
// Model file schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TripleFile {
    #[serde(rename = "A2")]
    a2: Vec<Vec<f64>>,
    #[serde(rename = "A1")]
    a1: Vec<Vec<f64>>,
    #[serde(rename = "A0")]
    a0: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BoundaryFile {
    #[serde(rename = "A1")]
    a1: Vec<Vec<f64>>,
    #[serde(rename = "A0")]
    a0: Vec<Vec<f64>>,
}

/// On-disk model document (UTF-8 JSON, matrices row-major).
#[derive(Serialize, Deserialize)]
struct ModelFile {
    phase_sizes: Vec<usize>,
    boundary: BoundaryFile,
    levels: Vec<TripleFile>,
    tail: TripleFile,
    inhomogeneity_bound: usize,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(QbdError::Parse(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(QbdError::Parse(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Parse and validate a model file; validation failure embeds the report.
pub fn load_model(path: &Path) -> Result<QbdModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| QbdError::Parse(format!("{}: {e}", path.display())))?;
    let model = model_from_file(file)?;
    let report = validate(&model);
    if !report.ok {
        return Err(QbdError::Validation(report));
    }
    Ok(model)
}

fn model_from_file(file: ModelFile) -> Result<QbdModel> {
    if file.inhomogeneity_bound + 1 != file.phase_sizes.len() {
        return Err(QbdError::Parse(format!(
            "inhomogeneity_bound = {} does not match phase_sizes length {}",
            file.inhomogeneity_bound,
            file.phase_sizes.len()
        )));
    }
    let boundary_a1 = rows_to_matrix(&file.boundary.a1, "boundary.A1")?;
    let boundary_a0 = rows_to_matrix(&file.boundary.a0, "boundary.A0")?;
    let mut level_blocks = Vec::with_capacity(file.levels.len());
    for (i, t) in file.levels.iter().enumerate() {
        level_blocks.push(LevelBlocks {
            a2: rows_to_matrix(&t.a2, &format!("levels[{i}].A2"))?,
            a1: rows_to_matrix(&t.a1, &format!("levels[{i}].A1"))?,
            a0: rows_to_matrix(&t.a0, &format!("levels[{i}].A0"))?,
        });
    }
    let tail = LevelBlocks {
        a2: rows_to_matrix(&file.tail.a2, "tail.A2")?,
        a1: rows_to_matrix(&file.tail.a1, "tail.A1")?,
        a0: rows_to_matrix(&file.tail.a0, "tail.A0")?,
    };
    QbdModel::new(
        file.phase_sizes,
        boundary_a1,
        boundary_a0,
        level_blocks,
        tail,
    )
}

/// Emit the same schema [`load_model`] reads; block entries round-trip
/// bit-exactly.
pub fn write_model(model: &QbdModel, path: &Path) -> Result<()> {
    let file = ModelFile {
        phase_sizes: model.phase_sizes.clone(),
        boundary: BoundaryFile {
            a1: matrix_to_rows(&model.boundary_a1),
            a0: matrix_to_rows(&model.boundary_a0),
        },
        levels: model
            .level_blocks
            .iter()
            .map(|lb| TripleFile {
                a2: matrix_to_rows(&lb.a2),
                a1: matrix_to_rows(&lb.a1),
                a0: matrix_to_rows(&lb.a0),
            })
            .collect(),
        tail: TripleFile {
            a2: matrix_to_rows(&model.tail.a2),
            a1: matrix_to_rows(&model.tail.a1),
            a0: matrix_to_rows(&model.tail.a0),
        },
        inhomogeneity_bound: model.inhomogeneity_bound,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| QbdError::Parse(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Built-in fixtures
// ---------------------------------------------------------------------------

/// Desk-scale fixtures: `"bd"` (p, q), `"two_phase"` (rho) and `"random"`
/// (levels, phases, seed).
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<QbdModel> {
    match name {
        "bd" => {
            let p = get_param(params, "p")?;
            let q = get_param(params, "q")?;
            birth_death(p, q)
        }
        "two_phase" => {
            let rho = get_param(params, "rho")?;
            two_phase(rho)
        }
        "random" => {
            let levels = get_param(params, "levels")? as usize;
            let phases = get_param(params, "phases")? as usize;
            let seed = get_param(params, "seed")? as u64;
            random_model(levels, phases, seed)
        }
        other => Err(QbdError::Argument(format!(
            "unknown builtin model {other:?}"
        ))),
    }
}

fn get_param(params: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    params
        .get(key)
        .copied()
        .ok_or_else(|| QbdError::Argument(format!("missing parameter {key:?}")))
}

/// Scalar birth-death chain: up `p`, down `q`, stay `1-p-q`; level 0 stays
/// with `1-p`.
pub fn birth_death(p: f64, q: f64) -> Result<QbdModel> {
    if !(p > 0.0 && q > 0.0 && p + q <= 1.0) {
        return Err(QbdError::Argument(format!(
            "bd requires p > 0, q > 0, p + q <= 1 (got p = {p}, q = {q})"
        )));
    }
    if p >= q {
        return Err(QbdError::NotPositiveRecurrent {
            spectral_radius: p / q,
        });
    }
    let s = 1.0 - p - q;
    QbdModel::new(
        vec![1, 1],
        DMatrix::from_element(1, 1, 1.0 - p),
        DMatrix::from_element(1, 1, p),
        vec![],
        LevelBlocks {
            a2: DMatrix::from_element(1, 1, q),
            a1: DMatrix::from_element(1, 1, s),
            a0: DMatrix::from_element(1, 1, p),
        },
    )
}

/// Fixed 2-phase QBD: phase mixing differs per direction, level motion has
/// upward mass `0.3 rho` and downward mass `0.3`, so the tail is positive
/// recurrent exactly when `rho < 1`.
pub fn two_phase(rho: f64) -> Result<QbdModel> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(QbdError::NotPositiveRecurrent {
            spectral_radius: rho,
        });
    }
    let w_up = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]);
    let w_stay = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.8]);
    let w_down = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.1, 0.9]);
    let a = 0.3 * rho;
    let b = 0.3;
    let s = 1.0 - a - b;
    let a0 = a * &w_up;
    let a1 = s * &w_stay;
    let a2 = b * &w_down;
    QbdModel::new(
        vec![2, 2],
        &a1 + &a2, // level 0 folds the downward mass into stay
        a0.clone(),
        vec![],
        LevelBlocks { a2, a1, a0 },
    )
}

/// Seeded random level-dependent QBD, rejection-sampled until validated,
/// irreducible and comfortably positive recurrent.
///
/// The tail's downward mass dominates by construction; samples are rejected
/// unless `sp(tail R) <= 0.45`, which keeps dense-truncation oracles at
/// `N = J + 25` well inside the acceptance tolerances.
pub fn random_model(levels: usize, phases: usize, seed: u64) -> Result<QbdModel> {
    if levels < 1 || phases < 1 {
        return Err(QbdError::Argument(
            "random model needs levels >= 1 and phases >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..100 {
        let model = sample_random_model(levels, phases, &mut rng)?;
        if !validate(&model).ok {
            continue;
        }
        let tail = model.tail();
        match crate::factorization::solve_tail_rg(&tail.a2, &tail.a1, &tail.a0, 1e-13) {
            Ok(tail_rg) => {
                if tail_rg.spectral_radius <= 0.45 {
                    return Ok(model);
                }
            }
            Err(_) => continue,
        }
    }
    Err(QbdError::Argument(format!(
        "random model generation failed after 100 attempts (seed {seed})"
    )))
}

fn sample_random_model(levels: usize, phases: usize, rng: &mut ChaCha8Rng) -> Result<QbdModel> {
    let n_star = levels;
    let mut phase_sizes: Vec<usize> = (0..=n_star).map(|_| rng.gen_range(1..=phases)).collect();
    // The square tail A2 acts on level N*-1, so the last two sizes agree.
    phase_sizes[n_star - 1] = phase_sizes[n_star];

    let positive_row = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        row
    };

    // Per-row direction masses: strong downward drift in every level.
    let masses = |rng: &mut ChaCha8Rng| -> (f64, f64, f64) {
        let w0 = rng.gen_range(0.05..0.18);
        let w2 = rng.gen_range(0.5..0.7);
        (w2, 1.0 - w2 - w0, w0)
    };

    let make_triple = |rng: &mut ChaCha8Rng, mk: usize, m_down: usize, m_up: usize| {
        let mut a2 = DMatrix::<f64>::zeros(mk, m_down);
        let mut a1 = DMatrix::<f64>::zeros(mk, mk);
        let mut a0 = DMatrix::<f64>::zeros(mk, m_up);
        for r in 0..mk {
            let (w2, w1, w0) = masses(rng);
            for (c, x) in positive_row(rng, m_down).into_iter().enumerate() {
                a2[(r, c)] = w2 * x;
            }
            for (c, x) in positive_row(rng, mk).into_iter().enumerate() {
                a1[(r, c)] = w1 * x;
            }
            for (c, x) in positive_row(rng, m_up).into_iter().enumerate() {
                a0[(r, c)] = w0 * x;
            }
        }
        LevelBlocks { a2, a1, a0 }
    };

    let m = |k: usize| phase_sizes[k.min(n_star)];
    let mut level_blocks = Vec::new();
    for k in 1..n_star {
        level_blocks.push(make_triple(rng, m(k), m(k - 1), m(k + 1)));
    }
    let tail = make_triple(rng, m(n_star), m(n_star), m(n_star));

    // Boundary row: fold a sampled downward mass into the stay block.
    let proto = make_triple(rng, m(0), m(0), m(1));
    let boundary_a1 = &proto.a1 + &proto.a2;
    let boundary_a0 = proto.a0;

    QbdModel::new(phase_sizes, boundary_a1, boundary_a0, level_blocks, tail)
}
