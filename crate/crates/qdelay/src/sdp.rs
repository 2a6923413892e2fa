//! Small dense semidefinite programming.
//!
//! Solves problems of the form
//!
//! ```text
//! minimize    Σ_b ⟨C_b, X_b⟩
//! subject to  Σ_b ⟨A_i,b, X_b⟩ + Σ_k B_ik u_k = b_i     (i = 1..m)
//!             X_b ⪰ 0,   u free
//! ```
//!
//! with a handful of PSD blocks up to ~50×50 — the shape produced by
//! sum-of-squares coefficient matching. The engine is an infeasible-start
//! primal-dual interior-point method with Nesterov–Todd scaling and a
//! Mehrotra predictor-corrector step, using dense linear algebra
//! throughout. Everything is single-threaded and deterministic: identical
//! input and options give bit-identical output.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Construction-time errors. Solve failures are reported through
/// [`SdpStatus`], never as errors.
#[derive(Debug, Error)]
pub enum SdpError {
    #[error("block index {index} out of range ({blocks} blocks)")]
    BlockIndex { index: usize, blocks: usize },
    #[error("entry ({row},{col}) out of range for block {block} of dim {dim}")]
    EntryRange {
        block: usize,
        row: usize,
        col: usize,
        dim: usize,
    },
    #[error("free-variable index {index} out of range ({count} declared)")]
    FreeIndex { index: usize, count: usize },
    #[error("matrix for block {block} has shape {rows}x{cols}, expected {dim}x{dim}")]
    Shape {
        block: usize,
        rows: usize,
        cols: usize,
        dim: usize,
    },
    #[error("matrix for block {block} is not symmetric: |A - A^T| = {defect:.3e}")]
    NotSymmetric { block: usize, defect: f64 },
}

/// One linear equality constraint: sparse symmetric cells per block plus
/// free-variable coefficients and a right-hand side.
#[derive(Debug, Clone)]
struct Constraint {
    /// (block, row, col, value) with row ≤ col; value applies symmetrically
    /// to both (row,col) and (col,row).
    cells: Vec<(u32, u32, u32, f64)>,
    free: Vec<(u32, f64)>,
    rhs: f64,
}

impl Constraint {
    /// ⟨A_i, X⟩ + B_i·u for the given primal iterate.
    fn apply(&self, blocks: &[DMatrix<f64>], free: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for &(b, r, c, v) in &self.cells {
            let x = blocks[b as usize][(r as usize, c as usize)];
            acc += if r == c { v * x } else { 2.0 * v * x };
        }
        for &(k, v) in &self.free {
            acc += v * free[k as usize];
        }
        acc
    }
}

/// A semidefinite program over PSD blocks and free scalar variables.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    block_dims: Vec<usize>,
    objective: Vec<DMatrix<f64>>,
    cons: Vec<Constraint>,
    free_vars: usize,
}

/// Relative symmetry-defect tolerance for dense matrix ingest.
const SYM_TOL: f64 = 1e-8;

impl SdpProblem {
    /// Problem with the given PSD block dimensions, `free_vars` free
    /// scalars, zero objective, and no constraints yet.
    pub fn new(block_dims: Vec<usize>, free_vars: usize) -> Self {
        let objective = block_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        SdpProblem {
            block_dims,
            objective,
            cons: Vec::new(),
            free_vars,
        }
    }

    /// Block dimensions.
    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    /// Number of constraints added so far.
    pub fn constraint_count(&self) -> usize {
        self.cons.len()
    }

    /// Number of free scalar variables.
    pub fn free_vars(&self) -> usize {
        self.free_vars
    }

    fn check_block(&self, block: usize) -> Result<usize, SdpError> {
        self.block_dims
            .get(block)
            .copied()
            .ok_or(SdpError::BlockIndex {
                index: block,
                blocks: self.block_dims.len(),
            })
    }

    /// Set the objective matrix of one block. The input is symmetrized on
    /// ingest; a symmetry defect beyond tolerance is rejected.
    pub fn set_objective(&mut self, block: usize, c: DMatrix<f64>) -> Result<(), SdpError> {
        let dim = self.check_block(block)?;
        let c = symmetrize_checked(block, c, dim)?;
        self.objective[block] = c;
        Ok(())
    }

    /// Add a constraint from sparse symmetric entries.
    ///
    /// Each `(block, row, col, value)` sets `A[row,col] = A[col,row] = value`
    /// in that block's coefficient matrix; duplicate cells within one call
    /// are summed. Returns the constraint's row index.
    pub fn add_constraint_entries(
        &mut self,
        entries: &[(usize, usize, usize, f64)],
        free: &[(usize, f64)],
        rhs: f64,
    ) -> Result<usize, SdpError> {
        use std::collections::BTreeMap;
        let mut cells: BTreeMap<(u32, u32, u32), f64> = BTreeMap::new();
        for &(b, r, c, v) in entries {
            let dim = self.check_block(b)?;
            if r >= dim || c >= dim {
                return Err(SdpError::EntryRange {
                    block: b,
                    row: r,
                    col: c,
                    dim,
                });
            }
            let (lo, hi) = if r <= c { (r, c) } else { (c, r) };
            *cells.entry((b as u32, lo as u32, hi as u32)).or_insert(0.0) += v;
        }
        let mut fcoef: BTreeMap<u32, f64> = BTreeMap::new();
        for &(k, v) in free {
            if k >= self.free_vars {
                return Err(SdpError::FreeIndex {
                    index: k,
                    count: self.free_vars,
                });
            }
            *fcoef.entry(k as u32).or_insert(0.0) += v;
        }
        self.cons.push(Constraint {
            cells: cells
                .into_iter()
                .filter(|&(_, v)| v != 0.0)
                .map(|((b, r, c), v)| (b, r, c, v))
                .collect(),
            free: fcoef.into_iter().filter(|&(_, v)| v != 0.0).collect(),
            rhs,
        });
        Ok(self.cons.len() - 1)
    }

    /// Add a constraint from dense per-block matrices (symmetrized on
    /// ingest, rejected beyond tolerance).
    pub fn add_constraint_dense(
        &mut self,
        mats: &[(usize, DMatrix<f64>)],
        free: &[(usize, f64)],
        rhs: f64,
    ) -> Result<usize, SdpError> {
        let mut entries = Vec::new();
        for (b, m) in mats {
            let dim = self.check_block(*b)?;
            let m = symmetrize_checked(*b, m.clone(), dim)?;
            for r in 0..dim {
                for c in r..dim {
                    if m[(r, c)] != 0.0 {
                        entries.push((*b, r, c, m[(r, c)]));
                    }
                }
            }
        }
        self.add_constraint_entries(&entries, free, rhs)
    }

    /// Objective value ⟨C, X⟩ at a primal point.
    pub fn objective_value(&self, blocks: &[DMatrix<f64>]) -> f64 {
        self.objective
            .iter()
            .zip(blocks)
            .map(|(c, x)| c.dot(x))
            .sum()
    }

    /// True iff every objective matrix is identically zero (a pure
    /// feasibility problem).
    pub fn is_feasibility(&self) -> bool {
        self.objective.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    /// Constraint residual vector `A(X) + B·u − b`.
    pub fn residual_vector(&self, blocks: &[DMatrix<f64>], free: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.cons.len(),
            self.cons.iter().map(|c| c.apply(blocks, free) - c.rhs),
        )
    }

    /// Sparse text dump of the full problem for cross-checking against
    /// external solvers: one record per line, `dim`, `obj`, `con`, `frc`
    /// (free coefficient) and `rhs` records.
    pub fn dump(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        for (b, d) in self.block_dims.iter().enumerate() {
            writeln!(w, "dim {b} {d}")?;
        }
        writeln!(w, "freevars {}", self.free_vars)?;
        for (b, c) in self.objective.iter().enumerate() {
            for r in 0..c.nrows() {
                for col in r..c.ncols() {
                    if c[(r, col)] != 0.0 {
                        writeln!(w, "obj {b} {r} {col} {:.17e}", c[(r, col)])?;
                    }
                }
            }
        }
        for (i, con) in self.cons.iter().enumerate() {
            for &(b, r, c, v) in &con.cells {
                writeln!(w, "con {i} {b} {r} {c} {v:.17e}")?;
            }
            for &(k, v) in &con.free {
                writeln!(w, "frc {i} {k} {v:.17e}")?;
            }
            writeln!(w, "rhs {i} {:.17e}", con.rhs)?;
        }
        Ok(())
    }
}

fn symmetrize_checked(
    block: usize,
    m: DMatrix<f64>,
    dim: usize,
) -> Result<DMatrix<f64>, SdpError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(SdpError::Shape {
            block,
            rows: m.nrows(),
            cols: m.ncols(),
            dim,
        });
    }
    let mut defect = 0.0f64;
    let mut scale = 0.0f64;
    for r in 0..dim {
        for c in 0..dim {
            defect = defect.max((m[(r, c)] - m[(c, r)]).abs());
            scale = scale.max(m[(r, c)].abs());
        }
    }
    if defect > SYM_TOL * (1.0 + scale) {
        return Err(SdpError::NotSymmetric { block, defect });
    }
    Ok((&m + m.transpose()) * 0.5)
}

/// Solver tolerances and iteration limits.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Primal/dual feasibility tolerance (relative).
    pub feas_tol: f64,
    /// Duality-gap tolerance (relative).
    pub gap_tol: f64,
    /// Iteration cap; hitting it yields `Unknown`.
    pub max_iters: usize,
    /// Step-length safety factor toward the PSD boundary.
    pub step_frac: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            feas_tol: 1e-7,
            gap_tol: 1e-7,
            max_iters: 200,
            step_frac: 0.98,
        }
    }
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    /// Converged with a nonzero objective.
    Optimal,
    /// Converged on a pure feasibility problem.
    Feasible,
    /// A dual improving ray with comfortable margin certifies primal
    /// infeasibility.
    Infeasible,
    /// No conclusion (iteration cap, numerical breakdown, or thin margins).
    Unknown,
}

/// Residual summary of an iterate.
#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    /// ‖A(X) + B·u − b‖∞ / (1 + ‖b‖∞)
    pub primal: f64,
    /// ‖C − A*(y) − Z‖∞ / (1 + ‖C‖∞), including free-variable dual rows
    pub dual: f64,
    /// ⟨X, Z⟩ / (1 + |⟨C,X⟩| + |bᵀy|)
    pub gap: f64,
}

/// Result of [`solve`].
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Primal PSD blocks.
    pub blocks: Vec<DMatrix<f64>>,
    /// Values of the free scalar variables.
    pub free_values: DVector<f64>,
    /// Dual vector for the equality constraints (full row indexing,
    /// zeros on preprocessed-away rows).
    pub dual: DVector<f64>,
    pub residuals: Residuals,
    pub iterations: usize,
    /// Constraint rows dropped as numerically dependent during
    /// preprocessing.
    pub dropped_rows: Vec<usize>,
    /// Human-readable diagnostics (populated for Infeasible/Unknown).
    pub message: String,
}

/// Largest `alpha` in (0, 1] with `X + alpha·D ⪰ 0`, scaled by `frac`,
/// computed from the eigenvalues of `L⁻¹ D L⁻ᵀ` where `X = L Lᵀ`.
fn psd_step(l_inv: &DMatrix<f64>, d: &DMatrix<f64>, frac: f64) -> f64 {
    let s = l_inv * d * l_inv.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let eigs = s.symmetric_eigenvalues();
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        1.0
    } else {
        (frac * (-1.0 / min)).min(1.0)
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// Per-iteration Nesterov–Todd scaling data for one block.
struct NtScale {
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: DVector<f64>,
    /// Inverse of the primal Cholesky factor, for step-length computation.
    lx_inv: DMatrix<f64>,
    lz_inv: DMatrix<f64>,
}

fn nt_scale(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<NtScale> {
    let dim = x.nrows();
    let lx = nalgebra::Cholesky::new(x.clone())?.l();
    let lz = nalgebra::Cholesky::new(z.clone())?.l();
    let m = lz.transpose() * &lx;
    let svd = nalgebra::SVD::new(m, true, true);
    let u = svd.u.as_ref()?;
    let vt = svd.v_t.as_ref()?;
    let sigma = &svd.singular_values;
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return None;
    }
    let _ = u;
    // G = L_X · V · Σ^{−1/2};  then GᵀZG = G⁻¹XG⁻ᵀ = diag(σ).
    let v = vt.transpose();
    let mut g = &lx * v;
    for (j, mut col) in g.column_iter_mut().enumerate() {
        col *= 1.0 / sigma[j].sqrt();
    }
    let lx_inv = lx
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(dim, dim));
    let lz_inv = lz
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(dim, dim));
    // G⁻¹ = Σ^{1/2} Vᵀ L_X⁻¹ — orthogonal and triangular pieces only.
    let mut g_inv = vt * &lx_inv;
    for (i, mut row) in g_inv.row_iter_mut().enumerate() {
        row *= sigma[i].sqrt();
    }
    let w = &g * g.transpose();
    Some(NtScale {
        g,
        g_inv,
        w,
        lambda: sigma.clone(),
        lx_inv,
        lz_inv,
    })
}

/// State for assembling and solving the reduced Newton ("Schur") system.
struct NewtonSystem {
    /// Cholesky factor of the Schur complement M.
    m_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// M⁻¹·B for the free-variable columns.
    m_inv_b: DMatrix<f64>,
    /// Cholesky of BᵀM⁻¹B (empty when there are no free variables).
    bmb_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    b_mat: DMatrix<f64>,
}

/// The solver workspace over the preprocessed (kept) constraint rows.
struct Workspace<'a> {
    prob: &'a SdpProblem,
    kept: Vec<usize>,
    b_vec: DVector<f64>,
    b_mat: DMatrix<f64>, // kept-rows × free_vars coefficient matrix
    norm_b: f64,
    norm_c: f64,
    total_dim: usize,
}

impl<'a> Workspace<'a> {
    /// A(X) over kept rows (no free contribution).
    fn apply_a(&self, blocks: &[DMatrix<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            self.kept.len(),
            self.kept.iter().map(|&i| {
                let con = &self.prob.cons[i];
                let mut acc = 0.0;
                for &(b, r, c, v) in &con.cells {
                    let x = blocks[b as usize][(r as usize, c as usize)];
                    acc += if r == c { v * x } else { 2.0 * v * x };
                }
                acc
            }),
        )
    }

    /// A*(y) as dense per-block matrices.
    fn apply_a_star(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = self
            .prob
            .block_dims
            .iter()
            .map(|&d| DMatrix::zeros(d, d))
            .collect();
        for (row, &i) in self.kept.iter().enumerate() {
            let yi = y[row];
            if yi == 0.0 {
                continue;
            }
            for &(b, r, c, v) in &self.prob.cons[i].cells {
                let (b, r, c) = (b as usize, r as usize, c as usize);
                out[b][(r, c)] += yi * v;
                if r != c {
                    out[b][(c, r)] += yi * v;
                }
            }
        }
        out
    }

    /// Schur matrix M_ij = Σ_b ⟨A_i, W A_j W⟩ plus the free-variable
    /// saddle factorizations.
    fn newton_system(&self, scales: &[NtScale]) -> Option<NewtonSystem> {
        let m = self.kept.len();
        let mut mat = DMatrix::zeros(m, m);
        // T_i = W A_i W per block, assembled from sparse cells as
        // rank-two outer-product sums, then contracted against A_j.
        let mut t_blocks: Vec<DMatrix<f64>> = self
            .prob
            .block_dims
            .iter()
            .map(|&d| DMatrix::zeros(d, d))
            .collect();
        for (row_i, &i) in self.kept.iter().enumerate() {
            for t in &mut t_blocks {
                t.fill(0.0);
            }
            let mut touched = [false; 64];
            for &(b, r, c, v) in &self.prob.cons[i].cells {
                let (bu, r, c) = (b as usize, r as usize, c as usize);
                let w = &scales[bu].w;
                let wr = w.column(r);
                let wc = w.column(c);
                let t = &mut t_blocks[bu];
                if bu < 64 {
                    touched[bu] = true;
                }
                if r == c {
                    t.ger(v, &wr, &wc, 1.0);
                } else {
                    t.ger(v, &wr, &wc, 1.0);
                    t.ger(v, &wc, &wr, 1.0);
                }
            }
            let _ = touched;
            for (row_j, &j) in self.kept.iter().enumerate().skip(row_i) {
                let mut acc = 0.0;
                for &(b, r, c, v) in &self.prob.cons[j].cells {
                    let t = &t_blocks[b as usize];
                    let (r, c) = (r as usize, c as usize);
                    let tv = if r == c {
                        t[(r, c)]
                    } else {
                        t[(r, c)] + t[(c, r)]
                    };
                    acc += v * tv;
                }
                mat[(row_i, row_j)] = acc;
                mat[(row_j, row_i)] = acc;
            }
        }
        // Tiny ridge keeps the factorization alive near convergence where
        // M becomes numerically singular.
        let mut ridge = 0.0;
        let m_chol = loop {
            let mut attempt = mat.clone();
            if ridge > 0.0 {
                for k in 0..m {
                    attempt[(k, k)] += ridge * (1.0 + mat[(k, k)].abs());
                }
            }
            match nalgebra::Cholesky::new(attempt) {
                Some(c) => break c,
                None => {
                    ridge = if ridge == 0.0 { 1e-14 } else { ridge * 100.0 };
                    if ridge > 1e-6 {
                        return None;
                    }
                }
            }
        };
        let p = self.prob.free_vars;
        let (m_inv_b, bmb_chol) = if p > 0 {
            let mut minvb = self.b_mat.clone();
            m_chol.solve_mut(&mut minvb);
            let bmb = self.b_mat.transpose() * &minvb;
            let bmb = (&bmb + bmb.transpose()) * 0.5;
            let chol = nalgebra::Cholesky::new(bmb)?;
            (minvb, Some(chol))
        } else {
            (DMatrix::zeros(m, 0), None)
        };
        Some(NewtonSystem {
            m_chol,
            m_inv_b,
            bmb_chol,
            b_mat: self.b_mat.clone(),
        })
    }
}

impl NewtonSystem {
    /// Solve [[M, B],[Bᵀ, 0]]·[Δy; Δu] = [r1; r2].
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut w = r1.clone();
        self.m_chol.solve_mut(&mut w);
        if let Some(bmb) = &self.bmb_chol {
            let rhs = self.b_mat.transpose() * &w - r2;
            let mut du = rhs;
            bmb.solve_mut(&mut du);
            let dy = w - &self.m_inv_b * &du;
            (dy, du)
        } else {
            (w, DVector::zeros(0))
        }
    }
}

/// Preprocess: detect numerically dependent constraint rows by modified
/// Gram–Schmidt on svec-flattened rows and drop them (reported). Returns
/// kept row indices, dropped row indices, and whether a dropped row was
/// inconsistent with the rows that absorbed it.
fn preprocess(prob: &SdpProblem) -> (Vec<usize>, Vec<usize>, bool) {
    let m = prob.cons.len();
    // svec length: off-diagonal cells weighted √2 so the flat inner
    // product equals ⟨A_i, A_j⟩; free coefficients appended unweighted.
    let mut offsets = Vec::with_capacity(prob.block_dims.len());
    let mut n = 0usize;
    for &d in &prob.block_dims {
        offsets.push(n);
        n += d * (d + 1) / 2;
    }
    let nfree = prob.free_vars;
    let ncols = n + nfree;
    let sq2 = std::f64::consts::SQRT_2;
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(m);
    for con in &prob.cons {
        let mut row = DVector::zeros(ncols);
        for &(b, r, c, v) in &con.cells {
            let (b, r, c) = (b as usize, r as usize, c as usize);
            let d = prob.block_dims[b];
            // upper-triangle row-major index of (r, c) with r ≤ c
            let idx = offsets[b] + r * d - r * (r + 1) / 2 + c;
            row[idx] = if r == c { v } else { sq2 * v };
        }
        for &(k, v) in &con.free {
            row[n + k as usize] = v;
        }
        rows.push(row);
    }
    let max_norm = rows.iter().map(|r| r.norm()).fold(0.0f64, f64::max);
    let tol = 1e-10 * max_norm.max(1.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut basis_rhs: Vec<f64> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut inconsistent = false;
    for (i, row) in rows.into_iter().enumerate() {
        let mut r = row;
        let mut rhs = prob.cons[i].rhs;
        // Two MGS passes for numerical stability.
        for _ in 0..2 {
            for (q, qr) in basis.iter().zip(&basis_rhs) {
                let proj = q.dot(&r);
                r -= q * proj;
                rhs -= qr * proj;
            }
        }
        let nrm = r.norm();
        if nrm <= tol {
            dropped.push(i);
            if rhs.abs() > 1e-8 * (1.0 + prob.cons[i].rhs.abs()) {
                inconsistent = true;
            }
        } else {
            kept.push(i);
            basis.push(&r / nrm);
            basis_rhs.push(rhs / nrm);
        }
    }
    (kept, dropped, inconsistent)
}

/// Solve the problem. Never panics on numerical trouble: breakdowns and
/// inconclusive runs surface as `Unknown` with diagnostics in `message`.
pub fn solve(prob: &SdpProblem, options: &SolveOptions) -> SdpSolution {
    let (kept, dropped, inconsistent) = preprocess(prob);
    let total_dim: usize = prob.block_dims.iter().sum();
    let make_solution = |status,
                         blocks: &[DMatrix<f64>],
                         free: &DVector<f64>,
                         dual_kept: &DVector<f64>,
                         res,
                         iters,
                         msg: String| {
        let mut dual = DVector::zeros(prob.cons.len());
        for (row, &i) in kept.iter().enumerate() {
            dual[i] = dual_kept[row];
        }
        SdpSolution {
            status,
            blocks: blocks.to_vec(),
            free_values: free.clone(),
            dual,
            residuals: res,
            iterations: iters,
            dropped_rows: dropped.clone(),
            message: msg,
        }
    };

    let mut blocks: Vec<DMatrix<f64>> = prob
        .block_dims
        .iter()
        .map(|&d| DMatrix::identity(d, d))
        .collect();
    let mut free = DVector::zeros(prob.free_vars);
    let zero_res = Residuals {
        primal: 0.0,
        dual: 0.0,
        gap: 0.0,
    };
    if inconsistent {
        return make_solution(
            SdpStatus::Unknown,
            &blocks,
            &free,
            &DVector::zeros(kept.len()),
            zero_res,
            0,
            "preprocessing found a dependent constraint row with inconsistent right-hand side"
                .into(),
        );
    }
    if kept.is_empty() || total_dim == 0 {
        // Unconstrained or empty: the identity iterate is feasible.
        let status = if prob.is_feasibility() {
            SdpStatus::Feasible
        } else {
            SdpStatus::Optimal
        };
        return make_solution(
            status,
            &blocks,
            &free,
            &DVector::zeros(kept.len()),
            zero_res,
            0,
            String::new(),
        );
    }

    let ws = {
        let b_vec = DVector::from_iterator(kept.len(), kept.iter().map(|&i| prob.cons[i].rhs));
        let mut b_mat = DMatrix::zeros(kept.len(), prob.free_vars);
        for (row, &i) in kept.iter().enumerate() {
            for &(k, v) in &prob.cons[i].free {
                b_mat[(row, k as usize)] = v;
            }
        }
        let norm_b = inf_norm(&b_vec);
        let norm_c = prob
            .objective
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        Workspace {
            prob,
            kept: kept.clone(),
            b_vec,
            b_mat,
            norm_b,
            norm_c,
            total_dim,
        }
    };

    // Initial point: scaled identities sized from the data norms.
    let scale_x = (1.0 + ws.norm_b).sqrt().max(1.0) * 10.0;
    let scale_z = (1.0 + ws.norm_c).max(1.0);
    for x in &mut blocks {
        *x *= scale_x;
    }
    let mut z_blocks: Vec<DMatrix<f64>> = prob
        .block_dims
        .iter()
        .map(|&d| DMatrix::identity(d, d) * scale_z)
        .collect();
    let mut y = DVector::zeros(kept.len());

    let mut best: Option<(f64, Vec<DMatrix<f64>>, DVector<f64>, DVector<f64>, Residuals)> = None;
    let mut message = String::new();
    let mut iters_done = 0usize;

    for iter in 0..options.max_iters {
        iters_done = iter;
        // Residuals at the current iterate.
        let ax = ws.apply_a(&blocks);
        let rp = &ws.b_vec - &ax - &ws.b_mat * &free;
        let astar_y = ws.apply_a_star(&y);
        let rd: Vec<DMatrix<f64>> = prob
            .objective
            .iter()
            .zip(&astar_y)
            .zip(&z_blocks)
            .map(|((c, ay), z)| c - ay - z)
            .collect();
        let rf = -(ws.b_mat.transpose() * &y);
        let gap: f64 = blocks.iter().zip(&z_blocks).map(|(x, z)| x.dot(z)).sum();
        let mu = gap / ws.total_dim as f64;
        let pobj = prob.objective_value(&blocks);
        let dobj = ws.b_vec.dot(&y);
        let res = Residuals {
            primal: inf_norm(&rp) / (1.0 + ws.norm_b),
            dual: rd
                .iter()
                .map(|m| m.iter().fold(0.0f64, |a, &v| a.max(v.abs())))
                .fold(inf_norm(&rf), f64::max)
                / (1.0 + ws.norm_c),
            gap: gap.abs() / (1.0 + pobj.abs() + dobj.abs()),
        };
        let score = res.primal.max(res.dual).max(res.gap);
        if best.as_ref().map_or(true, |(s, ..)| score < *s) {
            best = Some((score, blocks.clone(), free.clone(), y.clone(), res));
        }
        if res.primal <= options.feas_tol && res.dual <= options.feas_tol && res.gap <= options.gap_tol
        {
            let status = if prob.is_feasibility() {
                SdpStatus::Feasible
            } else {
                SdpStatus::Optimal
            };
            return make_solution(status, &blocks, &free, &y, res, iter, String::new());
        }

        // Dual improving-ray test. Normalize the candidate ray to bᵀy = 1;
        // then A*(y) ⪯ δ and ‖Bᵀy‖ ≤ δ rule out every feasible X with
        // tr(X) < 1/δ, so a small absolute δ is required before declaring
        // infeasibility (a merely relative bound would reject certificates
        // of moderate trace on thin feasible sets).
        if dobj > 0.0 {
            let max_eig: f64 = astar_y
                .iter()
                .map(|m| {
                    if m.nrows() == 0 {
                        f64::NEG_INFINITY
                    } else {
                        m.symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
                / dobj;
            let bty = inf_norm(&rf) / dobj;
            let delta = 100.0 * options.feas_tol;
            if max_eig <= delta && bty <= delta {
                return make_solution(
                    SdpStatus::Infeasible,
                    &blocks,
                    &free,
                    &y,
                    res,
                    iter,
                    format!(
                        "dual improving ray: b'y = {dobj:.3e}, normalized max eig A*(y) = \
                         {max_eig:.3e}, normalized B'y = {bty:.3e}"
                    ),
                );
            }
        }

        // Nesterov–Todd scaling per block.
        let scales: Vec<NtScale> = {
            let mut s = Vec::with_capacity(blocks.len());
            let mut failed = false;
            for (x, z) in blocks.iter().zip(&z_blocks) {
                match nt_scale(x, z) {
                    Some(ns) => s.push(ns),
                    None => {
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                message = "Cholesky/SVD breakdown in NT scaling".into();
                break;
            }
            s
        };

        let newton = match ws.newton_system(&scales) {
            Some(n) => n,
            None => {
                message = "Schur-complement factorization failed".into();
                break;
            }
        };

        // One Newton solve for a given scaled complementarity target D.
        let direction = |newton: &NewtonSystem,
                         d_targets: &[DMatrix<f64>]|
         -> (Vec<DMatrix<f64>>, DVector<f64>, Vec<DMatrix<f64>>, DVector<f64>) {
            // E_kl = 2 D_kl / (λ_k + λ_l); ΔX = G E Gᵀ − W ΔZ W.
            let e_blocks: Vec<DMatrix<f64>> = d_targets
                .iter()
                .zip(&scales)
                .map(|(d, s)| {
                    let dim = d.nrows();
                    let mut e = DMatrix::zeros(dim, dim);
                    for k in 0..dim {
                        for l in 0..dim {
                            e[(k, l)] = 2.0 * d[(k, l)] / (s.lambda[k] + s.lambda[l]);
                        }
                    }
                    e
                })
                .collect();
            let geg: Vec<DMatrix<f64>> = e_blocks
                .iter()
                .zip(&scales)
                .map(|(e, s)| {
                    let m = &s.g * e * s.g.transpose();
                    (&m + m.transpose()) * 0.5
                })
                .collect();
            // rhs1 = rp − A(G E Gᵀ) + A(W rd W)
            let wrdw: Vec<DMatrix<f64>> = rd
                .iter()
                .zip(&scales)
                .map(|(r, s)| {
                    let m = &s.w * r * &s.w;
                    (&m + m.transpose()) * 0.5
                })
                .collect();
            let rhs1 = &rp - ws.apply_a(&geg) + ws.apply_a(&wrdw);
            let (dy, du) = newton.solve(&rhs1, &rf);
            let astar_dy = ws.apply_a_star(&dy);
            let dz: Vec<DMatrix<f64>> = rd
                .iter()
                .zip(&astar_dy)
                .map(|(r, ady)| r - ady)
                .collect();
            let dx: Vec<DMatrix<f64>> = geg
                .iter()
                .zip(&dz)
                .zip(&scales)
                .map(|((ge, dzb), s)| {
                    let m = ge - &s.w * dzb * &s.w;
                    (&m + m.transpose()) * 0.5
                })
                .collect();
            (dx, du, dz, dy)
        };

        // Predictor (affine) direction: D = −Λ².
        let d_aff: Vec<DMatrix<f64>> = scales
            .iter()
            .map(|s| {
                let dim = s.lambda.len();
                let mut d = DMatrix::zeros(dim, dim);
                for k in 0..dim {
                    d[(k, k)] = -s.lambda[k] * s.lambda[k];
                }
                d
            })
            .collect();
        let (dx_aff, du_aff, dz_aff, dy_aff) = direction(&newton, &d_aff);

        let mut alpha_p = 1.0f64;
        let mut alpha_d = 1.0f64;
        for ((s, dx), dz) in scales.iter().zip(&dx_aff).zip(&dz_aff) {
            alpha_p = alpha_p.min(psd_step(&s.lx_inv, dx, 1.0));
            alpha_d = alpha_d.min(psd_step(&s.lz_inv, dz, 1.0));
        }
        let mut gap_aff = 0.0;
        for ((x, z), (dx, dz)) in blocks
            .iter()
            .zip(&z_blocks)
            .zip(dx_aff.iter().zip(&dz_aff))
        {
            gap_aff += (x + dx * alpha_p).dot(&(z + dz * alpha_d));
        }
        let mu_aff = gap_aff.max(0.0) / ws.total_dim as f64;
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).clamp(1e-8, 1.0)
        } else {
            0.1
        };

        // Corrector: D = σμI − Λ² − sym(ΔX̂_aff · ΔẐ_aff).
        let d_corr: Vec<DMatrix<f64>> = scales
            .iter()
            .zip(dx_aff.iter().zip(&dz_aff))
            .map(|(s, (dxa, dza))| {
                let dxh = &s.g_inv * dxa * s.g_inv.transpose();
                let dzh = s.g.transpose() * dza * &s.g;
                let cross = (&dxh * &dzh + &dzh * &dxh) * 0.5;
                let dim = s.lambda.len();
                let mut d = DMatrix::zeros(dim, dim);
                for k in 0..dim {
                    for l in 0..dim {
                        d[(k, l)] = -cross[(k, l)];
                    }
                    d[(k, k)] += sigma * mu - s.lambda[k] * s.lambda[k];
                }
                d
            })
            .collect();
        let (dx, du, dz, dy) = direction(&newton, &d_corr);
        let _ = (dx_aff, du_aff, dz_aff, dy_aff);

        let mut ap = 1.0f64;
        let mut ad = 1.0f64;
        for ((s, dxb), dzb) in scales.iter().zip(&dx).zip(&dz) {
            ap = ap.min(psd_step(&s.lx_inv, dxb, options.step_frac));
            ad = ad.min(psd_step(&s.lz_inv, dzb, options.step_frac));
        }
        if !(ap.is_finite() && ad.is_finite()) || ap <= 1e-14 || ad <= 1e-14 {
            message = format!("step collapse at iteration {iter} (alpha_p = {ap:.2e}, alpha_d = {ad:.2e})");
            break;
        }
        for ((x, dxb), _) in blocks.iter_mut().zip(&dx).zip(&z_blocks) {
            *x += dxb * ap;
            let sym = (x.clone() + x.transpose()) * 0.5;
            *x = sym;
        }
        for (z, dzb) in z_blocks.iter_mut().zip(&dz) {
            *z += dzb * ad;
            let sym = (z.clone() + z.transpose()) * 0.5;
            *z = sym;
        }
        y += &dy * ad;
        free += &du * ap;
    }

    // No convergence within the budget (or breakdown): report the best
    // iterate seen, honestly classified.
    let (_, bx, bf, by, bres) = best.unwrap_or((
        f64::INFINITY,
        blocks,
        free,
        y,
        Residuals {
            primal: f64::INFINITY,
            dual: f64::INFINITY,
            gap: f64::INFINITY,
        },
    ));
    if message.is_empty() {
        message = format!(
            "iteration cap {} reached (primal {:.2e}, dual {:.2e}, gap {:.2e})",
            options.max_iters, bres.primal, bres.dual, bres.gap
        );
    }
    make_solution(
        SdpStatus::Unknown,
        &bx,
        &bf,
        &by,
        bres,
        iters_done,
        message,
    )
}

/// One named pass/fail line of a [`check_solution`] report.
#[derive(Debug, Clone)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Independent recomputation report for a solution.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
    pub pass: bool,
}

impl CheckReport {
    /// The failing criteria, by name.
    pub fn failures(&self) -> Vec<&str> {
        self.items
            .iter()
            .filter(|i| !i.pass)
            .map(|i| i.name.as_str())
            .collect()
    }
}

/// Recompute eigenvalue floors and constraint residuals for a claimed
/// solution. Pure: consults only its arguments.
pub fn check_solution(prob: &SdpProblem, sol: &SdpSolution, tol: f64) -> CheckReport {
    let mut items = Vec::new();
    for (b, x) in sol.blocks.iter().enumerate() {
        let dim = prob.block_dims.get(b).copied().unwrap_or(0);
        if x.nrows() != dim || x.ncols() != dim {
            items.push(CheckItem {
                name: format!("block {b} shape"),
                value: x.nrows() as f64,
                threshold: dim as f64,
                pass: false,
            });
            continue;
        }
        let min_eig = min_eigenvalue(x);
        items.push(CheckItem {
            name: format!("eigenvalue floor block {b}"),
            value: min_eig,
            threshold: -tol,
            pass: min_eig >= -tol,
        });
    }
    if sol.blocks.len() != prob.block_dims.len() {
        items.push(CheckItem {
            name: "block count".into(),
            value: sol.blocks.len() as f64,
            threshold: prob.block_dims.len() as f64,
            pass: false,
        });
    } else {
        let resid = prob.residual_vector(&sol.blocks, &sol.free_values);
        let norm_b = prob.cons.iter().fold(0.0f64, |a, c| a.max(c.rhs.abs()));
        let rel = inf_norm(&resid) / (1.0 + norm_b);
        items.push(CheckItem {
            name: "constraint residual".into(),
            value: rel,
            threshold: tol,
            pass: rel <= tol,
        });
    }
    let pass = items.iter().all(|i| i.pass);
    CheckReport { items, pass }
}

/// Deterministic strictly feasible instance generator for solver testing.
///
/// Builds the problem from a random interior primal point `X* ≻ 0` (plus
/// free values `u*`), so `b := A(X*) + B·u*` is feasible by construction.
/// The objective is zero — a pure feasibility instance. A simple xorshift
/// stream keyed by `seed` makes instances reproducible without pulling an
/// RNG dependency into the solver.
pub fn random_feasible_instance(
    seed: u64,
    block_dims: &[usize],
    constraints: usize,
    free_vars: usize,
) -> SdpProblem {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).max(1);
    let mut next = move || {
        // xorshift64*
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        let v = state.wrapping_mul(0x2545F4914F6CDD1D);
        // map to (-1, 1)
        (v >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut prob = SdpProblem::new(block_dims.to_vec(), free_vars);
    // Interior point per block: F Fᵀ + ½I.
    let xstar: Vec<DMatrix<f64>> = block_dims
        .iter()
        .map(|&d| {
            let f = DMatrix::from_fn(d, d, |_, _| next());
            &f * f.transpose() + DMatrix::identity(d, d) * 0.5
        })
        .collect();
    let ustar = DVector::from_fn(free_vars, |_, _| next());
    for _ in 0..constraints {
        let mats: Vec<(usize, DMatrix<f64>)> = block_dims
            .iter()
            .enumerate()
            .map(|(b, &d)| {
                let raw = DMatrix::from_fn(d, d, |_, _| next());
                (b, (&raw + raw.transpose()) * 0.5)
            })
            .collect();
        let fcoef: Vec<(usize, f64)> = (0..free_vars).map(|k| (k, next())).collect();
        let rhs: f64 = mats
            .iter()
            .map(|(b, a)| a.dot(&xstar[*b]))
            .sum::<f64>()
            + fcoef
                .iter()
                .map(|&(k, v)| v * ustar[k])
                .sum::<f64>();
        prob.add_constraint_dense(&mats, &fcoef, rhs)
            .expect("generated constraint is well-formed");
    }
    prob
}
