//! Sum-of-squares encodings and exact certificate verification.
//!
//! This layer turns polynomial nonnegativity questions into the semidefinite
//! programs of [`crate::sdp`] and back: a polynomial with unknown linear
//! coefficients is SOS iff it equals `basisᵀ · G · basis` for some PSD Gram
//! matrix `G`, which is one PSD block plus one linear coefficient-matching
//! row per monomial. Nonnegativity on a semi-algebraic set `{p_i ≤ 0}` uses
//! one SOS multiplier per domain polynomial.
//!
//! Floating-point solver output is not a proof. [`rationalize`] rounds a
//! solution to rational arithmetic and repairs it so that every matching
//! row holds *exactly*; [`verify_certificate`] then re-checks the assembled
//! identity from scratch in rational arithmetic. Only the PSD property is
//! left to a conservative floating-point eigenvalue bound.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

use crate::poly::{rat, Monomial, PolyError, Polynomial, Rational};
use crate::sdp::{SdpError, SdpProblem, SdpSolution};

#[derive(Debug, Error)]
pub enum SosError {
    #[error("gram basis requires an even target degree, got {degree}")]
    OddDegree { degree: u32 },
    #[error("monomial {monomial} of the target lies outside the span of basis products")]
    SpanViolation { monomial: String },
    #[error("arity mismatch: expected {expected}, found {found}")]
    Arity { expected: usize, found: usize },
    #[error("block index {index} out of range ({blocks} blocks)")]
    BlockIndex { index: usize, blocks: usize },
    #[error("solution shape does not match the builder: {0}")]
    ShapeMismatch(String),
    #[error("rationalization failed: {0}")]
    Rationalize(String),
    #[error("certificate parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

/// Identifies one scalar decision variable of a builder-level problem:
/// either a free scalar or one cell (row ≤ col) of a PSD block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DecisionId {
    Free(usize),
    Cell { block: usize, row: usize, col: usize },
}

/// Normalize a cell id to its upper-triangle representative.
pub fn cell(block: usize, row: usize, col: usize) -> DecisionId {
    if row <= col {
        DecisionId::Cell { block, row, col }
    } else {
        DecisionId::Cell {
            block,
            row: col,
            col: row,
        }
    }
}

/// A polynomial whose coefficients are affine in decision variables:
/// `base + Σ_d d · part_d` with each `part_d` an ordinary polynomial.
#[derive(Debug, Clone)]
pub struct ParamPoly {
    arity: usize,
    base: Polynomial,
    parts: BTreeMap<DecisionId, Polynomial>,
}

impl ParamPoly {
    pub fn zero(arity: usize) -> Self {
        ParamPoly {
            arity,
            base: Polynomial::zero(arity),
            parts: BTreeMap::new(),
        }
    }

    pub fn from_poly(base: Polynomial) -> Self {
        ParamPoly {
            arity: base.arity(),
            base,
            parts: BTreeMap::new(),
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn base(&self) -> &Polynomial {
        &self.base
    }

    pub fn parts(&self) -> impl Iterator<Item = (&DecisionId, &Polynomial)> {
        self.parts.iter()
    }

    /// Largest degree over the base and all decision parts.
    pub fn degree(&self) -> u32 {
        self.parts
            .values()
            .map(|p| p.degree())
            .fold(self.base.degree(), u32::max)
    }

    fn check_arity(&self, other: usize) -> Result<(), SosError> {
        if self.arity != other {
            return Err(SosError::Arity {
                expected: self.arity,
                found: other,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamPoly) -> Result<ParamPoly, SosError> {
        self.check_arity(other.arity)?;
        let mut parts = self.parts.clone();
        for (d, p) in &other.parts {
            let entry = parts
                .entry(*d)
                .or_insert_with(|| Polynomial::zero(self.arity));
            *entry = entry.add(p)?;
        }
        parts.retain(|_, p| !p.is_zero());
        Ok(ParamPoly {
            arity: self.arity,
            base: self.base.add(&other.base)?,
            parts,
        })
    }

    pub fn sub(&self, other: &ParamPoly) -> Result<ParamPoly, SosError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> ParamPoly {
        ParamPoly {
            arity: self.arity,
            base: self.base.neg(),
            parts: self.parts.iter().map(|(d, p)| (*d, p.neg())).collect(),
        }
    }

    pub fn scale(&self, factor: &Rational) -> ParamPoly {
        if factor.is_zero() {
            return ParamPoly::zero(self.arity);
        }
        ParamPoly {
            arity: self.arity,
            base: self.base.scale(factor),
            parts: self
                .parts
                .iter()
                .map(|(d, p)| (*d, p.scale(factor)))
                .collect(),
        }
    }

    /// Multiply by an ordinary polynomial (base and every part alike).
    pub fn mul_poly(&self, other: &Polynomial) -> Result<ParamPoly, SosError> {
        self.check_arity(other.arity())?;
        let mut parts = BTreeMap::new();
        for (d, p) in &self.parts {
            let q = p.mul(other)?;
            if !q.is_zero() {
                parts.insert(*d, q);
            }
        }
        Ok(ParamPoly {
            arity: self.arity,
            base: self.base.mul(other)?,
            parts,
        })
    }

    /// Add `decision · poly` to this parametric polynomial.
    pub fn add_decision(&mut self, decision: DecisionId, poly: &Polynomial) -> Result<(), SosError> {
        self.check_arity(poly.arity())?;
        let entry = self
            .parts
            .entry(decision)
            .or_insert_with(|| Polynomial::zero(self.arity));
        *entry = entry.add(poly)?;
        if entry.is_zero() {
            self.parts.remove(&decision);
        }
        Ok(())
    }

    /// The quadratic form `basisᵀ · G · basis` of a PSD block, as a
    /// parametric polynomial in that block's cells.
    pub fn gram_form(block: usize, basis: &[Monomial]) -> Result<ParamPoly, SosError> {
        let arity = basis.first().map_or(0, Monomial::arity);
        let mut out = ParamPoly::zero(arity);
        for (i, bi) in basis.iter().enumerate() {
            for (j, bj) in basis.iter().enumerate().skip(i) {
                let prod = bi.mul(bj)?;
                let coeff = if i == j { rat(1, 1) } else { rat(2, 1) };
                let poly = Polynomial::from_terms(arity, vec![(prod, coeff)])?;
                out.add_decision(cell(block, i, j), &poly)?;
            }
        }
        Ok(out)
    }

    /// Substitute rational values for every decision variable.
    pub fn resolve(&self, values: &RationalSolution) -> Result<Polynomial, SosError> {
        let mut out = self.base.clone();
        for (d, p) in &self.parts {
            let v = values.value(*d)?;
            if !v.is_zero() {
                out = out.add(&p.scale(&v))?;
            }
        }
        Ok(out)
    }

    /// Union of monomials appearing in the base or any part.
    fn monomials(&self) -> BTreeSet<Monomial> {
        let mut set: BTreeSet<Monomial> = self.base.terms().map(|(m, _)| m.clone()).collect();
        for p in self.parts.values() {
            set.extend(p.terms().map(|(m, _)| m.clone()));
        }
        set
    }
}

/// Monomial basis for SOS representations of polynomials of degree at most
/// `target_degree` (which must be even): all monomials of degree at most
/// `target_degree / 2`, in graded order.
pub fn gram_basis(arity: usize, target_degree: u32) -> Result<Vec<Monomial>, SosError> {
    if target_degree % 2 != 0 {
        return Err(SosError::OddDegree {
            degree: target_degree,
        });
    }
    let half = target_degree / 2;
    let mut out = Vec::new();
    let mut exps = vec![0u32; arity];
    // Enumerate exponent vectors of total degree ≤ half in lexicographic
    // order, then sort into the monomial (graded) order.
    fn rec(exps: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Monomial>) {
        if pos == exps.len() {
            out.push(Monomial::new(exps.clone()));
            return;
        }
        for e in 0..=remaining {
            exps[pos] = e;
            rec(exps, pos + 1, remaining - e, out);
        }
        exps[pos] = 0;
    }
    rec(&mut exps, 0, half, &mut out);
    out.sort();
    Ok(out)
}

/// Metadata for one PSD block of the builder-level problem.
#[derive(Debug, Clone)]
struct BlockInfo {
    name: String,
    dim: usize,
    /// Gram blocks carry the monomial basis; plain matrix decisions do not.
    basis: Option<Vec<Monomial>>,
}

/// One linear equality row over decision variables, in exact arithmetic.
#[derive(Debug, Clone)]
struct Row {
    coeffs: BTreeMap<DecisionId, Rational>,
    rhs: Rational,
}

/// Accumulates PSD blocks, free scalars, and exact linear rows, then lowers
/// them to an [`SdpProblem`]. The rational rows are kept so that solutions
/// can later be repaired and verified exactly.
#[derive(Debug, Clone, Default)]
pub struct SdpBuilder {
    blocks: Vec<BlockInfo>,
    free_names: Vec<String>,
    rows: Vec<Row>,
}

impl SdpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_free(&mut self, name: &str) -> DecisionId {
        self.free_names.push(name.to_string());
        DecisionId::Free(self.free_names.len() - 1)
    }

    /// A PSD matrix decision variable (no Gram basis attached).
    pub fn add_matrix_block(&mut self, name: &str, dim: usize) -> usize {
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            dim,
            basis: None,
        });
        self.blocks.len() - 1
    }

    fn add_gram_block(&mut self, name: &str, basis: Vec<Monomial>) -> usize {
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            dim: basis.len(),
            basis: Some(basis),
        });
        self.blocks.len() - 1
    }

    pub fn rename_block(&mut self, block: usize, name: &str) {
        if let Some(info) = self.blocks.get_mut(block) {
            info.name = name.to_string();
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn free_count(&self) -> usize {
        self.free_names.len()
    }

    pub fn free_name(&self, index: usize) -> Option<&str> {
        self.free_names.get(index).map(|s| s.as_str())
    }

    pub fn block_name(&self, block: usize) -> Option<&str> {
        self.blocks.get(block).map(|b| b.name.as_str())
    }

    pub fn block_dim(&self, block: usize) -> Option<usize> {
        self.blocks.get(block).map(|b| b.dim)
    }

    pub fn block_basis(&self, block: usize) -> Option<&[Monomial]> {
        self.blocks.get(block).and_then(|b| b.basis.as_deref())
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Add one exact equality row `Σ coeff · decision = rhs`.
    pub fn add_row(&mut self, coeffs: BTreeMap<DecisionId, Rational>, rhs: Rational) {
        self.rows.push(Row { coeffs, rhs });
    }

    /// Lower to a float SDP. With `trace_objective` the objective is the
    /// total trace over all PSD blocks — a bounded, strictly dual-feasible
    /// choice that keeps iterates small; otherwise pure feasibility.
    pub fn build(&self, trace_objective: bool) -> Result<SdpProblem, SosError> {
        let dims: Vec<usize> = self.blocks.iter().map(|b| b.dim).collect();
        let mut prob = SdpProblem::new(dims.clone(), self.free_names.len());
        if trace_objective {
            for (b, &d) in dims.iter().enumerate() {
                prob.set_objective(b, DMatrix::identity(d, d))?;
            }
        }
        for row in &self.rows {
            let mut entries = Vec::new();
            let mut free = Vec::new();
            for (d, c) in &row.coeffs {
                let cf = c.to_f64().ok_or_else(|| {
                    SosError::Rationalize("coefficient does not fit in f64".into())
                })?;
                match *d {
                    DecisionId::Free(k) => free.push((k, cf)),
                    DecisionId::Cell { block, row: i, col: j } => {
                        // Rows store the coefficient of the cell value; the
                        // SDP pairing counts off-diagonal entries twice.
                        let a = if i == j { cf } else { cf / 2.0 };
                        entries.push((block, i, j, a));
                    }
                }
            }
            let rhs = row
                .rhs
                .to_f64()
                .ok_or_else(|| SosError::Rationalize("rhs does not fit in f64".into()))?;
            prob.add_constraint_entries(&entries, &free, rhs)?;
        }
        Ok(prob)
    }
}

/// Handle to one "polynomial equals a Gram form" constraint.
#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub target: ParamPoly,
    pub basis: Vec<Monomial>,
    pub gram_block: usize,
}

/// Require `target` to be a sum of squares over the given Gram basis.
///
/// Adds one PSD block and one coefficient-matching row per monomial of the
/// pairwise basis-product span. Any monomial of the target outside that
/// span is rejected, naming the offender.
pub fn encode_sos(
    target: &ParamPoly,
    basis: &[Monomial],
    builder: &mut SdpBuilder,
) -> Result<SosConstraint, SosError> {
    let arity = target.arity();
    for b in basis {
        if b.arity() != arity {
            return Err(SosError::Arity {
                expected: arity,
                found: b.arity(),
            });
        }
    }
    let name = format!("sos{}", builder.block_count());
    let block = builder.add_gram_block(&name, basis.to_vec());

    // Span of pairwise products, with the cells contributing to each
    // monomial (off-diagonal cells count twice by symmetry).
    let mut span: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, bi) in basis.iter().enumerate() {
        for (j, bj) in basis.iter().enumerate().skip(i) {
            span.entry(bi.mul(bj)?).or_default().push((i, j));
        }
    }
    for m in target.monomials() {
        if !span.contains_key(&m) {
            let as_poly = Polynomial::from_terms(arity, vec![(m, rat(1, 1))])?;
            return Err(SosError::SpanViolation {
                monomial: as_poly.to_string(),
            });
        }
    }
    for (mono, cells) in &span {
        let mut coeffs: BTreeMap<DecisionId, Rational> = BTreeMap::new();
        for &(i, j) in cells {
            let c = if i == j { rat(1, 1) } else { rat(2, 1) };
            coeffs.insert(cell(block, i, j), c);
        }
        // Decision parts of the target move to the left-hand side.
        for (d, p) in target.parts() {
            let c = p.coefficient(mono);
            if !c.is_zero() {
                *coeffs.entry(*d).or_insert_with(Rational::zero) -= c;
            }
        }
        coeffs.retain(|_, c| !c.is_zero());
        builder.add_row(coeffs, target.base().coefficient(mono));
    }
    Ok(SosConstraint {
        target: target.clone(),
        basis: basis.to_vec(),
        gram_block: block,
    })
}

/// Handles returned by [`encode_nonneg_on_set`].
#[derive(Debug, Clone)]
pub struct NonnegEncoding {
    pub master: SosConstraint,
    pub multipliers: Vec<SosConstraint>,
}

/// Require `target ≥ 0` on the set `{x : p_i(x) ≤ 0 for all i}`.
///
/// Introduces one SOS multiplier `h_i` per domain polynomial and encodes
/// the master constraint `target + Σ h_i · p_i` is SOS. On the set each
/// `h_i · p_i` is ≤ 0, so the target dominates an SOS polynomial there.
/// With no domain polynomials this degenerates exactly to [`encode_sos`].
pub fn encode_nonneg_on_set(
    target: &ParamPoly,
    domain_polys: &[Polynomial],
    multiplier_degree: u32,
    builder: &mut SdpBuilder,
) -> Result<NonnegEncoding, SosError> {
    if multiplier_degree % 2 != 0 {
        return Err(SosError::OddDegree {
            degree: multiplier_degree,
        });
    }
    let arity = target.arity();
    for p in domain_polys {
        if p.arity() != arity {
            return Err(SosError::Arity {
                expected: arity,
                found: p.arity(),
            });
        }
    }
    let mult_basis = gram_basis(arity, multiplier_degree)?;
    let mut master_target = target.clone();
    let mut multipliers = Vec::new();
    for (k, p) in domain_polys.iter().enumerate() {
        let name = format!("mult{k}");
        let block = builder.add_gram_block(&name, mult_basis.clone());
        let h = ParamPoly::gram_form(block, &mult_basis)?;
        master_target = master_target.add(&h.mul_poly(p)?)?;
        multipliers.push(SosConstraint {
            target: h,
            basis: mult_basis.clone(),
            gram_block: block,
        });
    }
    // Master degree: whatever is needed to cover the combined target,
    // rounded up to even.
    let mut deg = master_target.degree();
    if deg % 2 != 0 {
        deg += 1;
    }
    let master_basis = gram_basis(arity, deg)?;
    let master = encode_sos(&master_target, &master_basis, builder)?;
    builder.rename_block(master.gram_block, "master");
    Ok(NonnegEncoding {
        master,
        multipliers,
    })
}

/// Dense symmetric matrix over exact rationals.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalMatrix {
    dim: usize,
    data: Vec<Rational>,
}

impl RationalMatrix {
    pub fn zeros(dim: usize) -> Self {
        RationalMatrix {
            dim,
            data: vec![Rational::zero(); dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> &Rational {
        &self.data[i * self.dim + j]
    }

    /// Set the symmetric pair (i,j) and (j,i).
    pub fn set_sym(&mut self, i: usize, j: usize, v: Rational) {
        self.data[i * self.dim + j] = v.clone();
        self.data[j * self.dim + i] = v;
    }

    pub fn add_sym(&mut self, i: usize, j: usize, v: &Rational) {
        let cur = self.get(i, j).clone();
        self.set_sym(i, j, cur + v);
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.get(i, j).to_f64().unwrap_or(f64::NAN)
        })
    }

    /// Smallest eigenvalue in a floating-point check.
    pub fn min_eigenvalue_f64(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        self.to_f64()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Exact positive definiteness via rational LDLᵀ pivots.
    pub fn is_positive_definite_exact(&self) -> bool {
        let n = self.dim;
        let mut w: Vec<Vec<Rational>> = (0..n)
            .map(|i| (0..n).map(|j| self.get(i, j).clone()).collect())
            .collect();
        for k in 0..n {
            if !w[k][k].is_positive() {
                return false;
            }
            for i in (k + 1)..n {
                let f = &w[i][k] / &w[k][k];
                for j in k..n {
                    let delta = &f * &w[k][j];
                    w[i][j] = &w[i][j] - &delta;
                }
            }
        }
        true
    }

    /// Exact inverse by Gauss–Jordan elimination with partial (first
    /// nonzero) pivoting, or `None` when the matrix is singular.
    pub fn inverse(&self) -> Option<RationalMatrix> {
        let n = self.dim;
        let mut w: Vec<Vec<Rational>> = (0..n)
            .map(|i| {
                let mut row: Vec<Rational> = (0..n).map(|j| self.get(i, j).clone()).collect();
                row.extend((0..n).map(|j| {
                    if i == j {
                        Rational::one()
                    } else {
                        Rational::zero()
                    }
                }));
                row
            })
            .collect();
        for k in 0..n {
            let pivot = (k..n).find(|&i| !w[i][k].is_zero())?;
            w.swap(k, pivot);
            let p = w[k][k].clone();
            for v in &mut w[k] {
                *v /= &p;
            }
            for i in 0..n {
                if i == k || w[i][k].is_zero() {
                    continue;
                }
                let f = w[i][k].clone();
                for j in 0..2 * n {
                    let delta = &f * &w[k][j];
                    w[i][j] = &w[i][j] - &delta;
                }
            }
        }
        let mut out = RationalMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = w[i][n + j].clone();
            }
        }
        Some(out)
    }

    /// `basisᵀ · G · basis` as an exact polynomial.
    pub fn quadratic_form(&self, basis: &[Monomial]) -> Result<Polynomial, SosError> {
        if basis.len() != self.dim {
            return Err(SosError::ShapeMismatch(format!(
                "basis of length {} against Gram of dim {}",
                basis.len(),
                self.dim
            )));
        }
        let arity = basis.first().map_or(0, Monomial::arity);
        let mut terms: BTreeMap<Monomial, Rational> = BTreeMap::new();
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = self.get(i, j);
                if v.is_zero() {
                    continue;
                }
                let mono = basis[i].mul(&basis[j])?;
                let c = if i == j { v.clone() } else { rat(2, 1) * v };
                *terms.entry(mono).or_insert_with(Rational::zero) += c;
            }
        }
        Ok(Polynomial::from_terms(arity, terms)?)
    }
}

/// Exact rational assignment to every decision variable.
#[derive(Debug, Clone)]
pub struct RationalSolution {
    pub grams: Vec<RationalMatrix>,
    pub free: Vec<Rational>,
}

impl RationalSolution {
    pub fn value(&self, d: DecisionId) -> Result<Rational, SosError> {
        match d {
            DecisionId::Free(k) => self
                .free
                .get(k)
                .cloned()
                .ok_or_else(|| SosError::ShapeMismatch(format!("free index {k} out of range"))),
            DecisionId::Cell { block, row, col } => self
                .grams
                .get(block)
                .map(|g| g.get(row, col).clone())
                .ok_or(SosError::BlockIndex {
                    index: block,
                    blocks: self.grams.len(),
                }),
        }
    }
}

/// Best rational approximation of `x` with denominator at most `max_den`,
/// by continued fractions (including the closing semiconvergent). Values
/// closer to a simple fraction than the denominator cap allows round to it
/// exactly — in particular magnitudes below `1/max_den` collapse to zero.
pub fn approx_rational(x: f64, max_den: u64) -> Rational {
    assert!(x.is_finite(), "cannot rationalize a non-finite value");
    let negative = x < 0.0;
    let mut t = x.abs();
    // Convergents h/k with the usual two-term recurrence.
    let (mut h0, mut k0, mut h1, mut k1) = (1i128, 0i128, 0i128, 1i128);
    let cap = max_den as i128;
    for _ in 0..64 {
        let a = t.floor();
        if a > 1e18 {
            break;
        }
        let ai = a as i128;
        let h2 = ai.saturating_mul(h0).saturating_add(h1);
        let k2 = ai.saturating_mul(k0).saturating_add(k1);
        if k2 > cap {
            // Best semiconvergent under the cap.
            let amax = if k0 > 0 { (cap - k1) / k0 } else { 0 };
            let hs = amax.saturating_mul(h0).saturating_add(h1);
            let ks = amax.saturating_mul(k0).saturating_add(k1);
            let cand = |h: i128, k: i128| -> Option<f64> {
                if k <= 0 {
                    None
                } else {
                    Some((x.abs() - h as f64 / k as f64).abs())
                }
            };
            let keep_prev = match (cand(h0, k0), cand(hs, ks)) {
                (Some(dp), Some(ds)) => dp <= ds,
                (Some(_), None) => true,
                _ => false,
            };
            let (h, k) = if keep_prev { (h0, k0) } else { (hs, ks) };
            return signed_ratio(h, k, negative);
        }
        h1 = h0;
        k1 = k0;
        h0 = h2;
        k0 = k2;
        let frac = t - a;
        if frac <= 0.0 || !(1.0 / frac).is_finite() {
            break;
        }
        t = 1.0 / frac;
    }
    signed_ratio(h0, k0.max(1), negative)
}

fn signed_ratio(num: i128, den: i128, negative: bool) -> Rational {
    let n = num_bigint::BigInt::from(if negative { -num } else { num });
    Rational::new(n, num_bigint::BigInt::from(den.max(1)))
}

/// Controls for [`rationalize`].
#[derive(Debug, Clone)]
pub struct RationalizeOptions {
    /// Denominator cap for the initial continued-fraction rounding.
    pub max_denominator: u64,
    /// Snap levels: Gram rows/columns whose diagonal falls below the level
    /// are zeroed; the first level for which the repair succeeds wins.
    pub snap_levels: Vec<f64>,
    /// Floating-point eigenvalue floor accepted as PSD.
    pub psd_floor: f64,
    /// How many diagonal-shift repairs of a frozen block to attempt.
    pub max_repairs: usize,
}

impl Default for RationalizeOptions {
    fn default() -> Self {
        RationalizeOptions {
            max_denominator: 1_000_000,
            snap_levels: vec![0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4],
            psd_floor: -1e-9,
            max_repairs: 3,
        }
    }
}

/// Turn a float SDP solution into exact rationals satisfying every builder
/// row *exactly*.
///
/// The procedure: round all entries by continued fractions; zero out Gram
/// rows/columns whose diagonal is numerically dead (trying a ladder of snap
/// levels); repair the free scalars exactly over the rows that no longer
/// have any live cell in the `absorber` block (a least-squares projection
/// in rational arithmetic); and finally absorb every remaining row residual
/// into the absorber block, whose per-row cell supports are disjoint by
/// construction so the corrections never interfere. PSD is then re-checked
/// in floating point; a frozen block that misses the floor is nudged by a
/// small rational diagonal shift and the repair re-runs.
pub fn rationalize(
    builder: &SdpBuilder,
    solution: &SdpSolution,
    absorber: usize,
    options: &RationalizeOptions,
) -> Result<RationalSolution, SosError> {
    if absorber >= builder.block_count() {
        return Err(SosError::BlockIndex {
            index: absorber,
            blocks: builder.block_count(),
        });
    }
    if solution.blocks.len() != builder.block_count()
        || solution.free_values.len() != builder.free_count()
    {
        return Err(SosError::ShapeMismatch(
            "solution block or free-variable count differs from the builder".into(),
        ));
    }
    for (b, info) in builder.blocks.iter().enumerate() {
        if solution.blocks[b].nrows() != info.dim {
            return Err(SosError::ShapeMismatch(format!(
                "block {b} has dim {}, expected {}",
                solution.blocks[b].nrows(),
                info.dim
            )));
        }
    }
    // Absorber cells must be private to one row each for the final
    // projection to be exact.
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    for row in &builder.rows {
        for d in row.coeffs.keys() {
            if let DecisionId::Cell { block, row: i, col: j } = *d {
                if block == absorber && !seen.insert((i, j)) {
                    return Err(SosError::Rationalize(format!(
                        "absorber cell ({i},{j}) appears in more than one row"
                    )));
                }
            }
        }
    }

    let rounded: Vec<RationalMatrix> = builder
        .blocks
        .iter()
        .enumerate()
        .map(|(b, info)| {
            let mut g = RationalMatrix::zeros(info.dim);
            for i in 0..info.dim {
                for j in i..info.dim {
                    let v = solution.blocks[b][(i, j)];
                    g.set_sym(i, j, approx_rational(v, options.max_denominator));
                }
            }
            g
        })
        .collect();
    let rounded_free: Vec<Rational> = solution
        .free_values
        .iter()
        .map(|&v| approx_rational(v, options.max_denominator))
        .collect();

    let mut level_errors: Vec<String> = Vec::new();
    for &level in &options.snap_levels {
        match rationalize_at_level(
            builder,
            solution,
            absorber,
            &rounded,
            &rounded_free,
            level,
            options,
        ) {
            Ok(rs) => return Ok(rs),
            Err(e) => level_errors.push(format!("snap {level:.1e}: {e}")),
        }
    }
    Err(SosError::Rationalize(format!(
        "every snap level failed [{}]",
        level_errors.join(" | ")
    )))
}

fn rationalize_at_level(
    builder: &SdpBuilder,
    solution: &SdpSolution,
    absorber: usize,
    rounded: &[RationalMatrix],
    rounded_free: &[Rational],
    level: f64,
    options: &RationalizeOptions,
) -> Result<RationalSolution, SosError> {
    // Snap: zero rows/columns whose float diagonal is below the level, or
    // whose rounded diagonal is exactly zero (a PSD matrix with zero
    // diagonal has a zero row, so this loses nothing). The set grows
    // adaptively: a PSD-floor failure on a tiny diagonal marks a direction
    // the identity forces to zero that the float solve only approached.
    let mut snapped: Vec<Vec<bool>> = Vec::with_capacity(rounded.len());
    for (b, g) in rounded.iter().enumerate() {
        let snap = (0..g.dim())
            .map(|k| solution.blocks[b][(k, k)] < level || g.get(k, k).is_zero())
            .collect();
        snapped.push(snap);
    }
    // Accumulated diagonal regularization per block cell, kept across
    // rounds so a block that fails the floor from honest rounding noise
    // (not a forced-zero face) drifts toward strict definiteness.
    let mut shifts: Vec<Vec<Rational>> = rounded
        .iter()
        .map(|g| vec![Rational::zero(); g.dim()])
        .collect();

    let total_dim: usize = rounded.iter().map(RationalMatrix::dim).sum();
    let mut shift_budget = options.max_repairs;
    let mut last_floor_failure = String::new();
    for _round in 0..=(options.max_repairs + total_dim) {
        // Rebuild every block from the rounded values under the current
        // snap set and shifts, and reset the free scalars.
        let mut grams = rounded.to_vec();
        for (b, g) in grams.iter_mut().enumerate() {
            for k in 0..g.dim() {
                if snapped[b][k] {
                    for j in 0..g.dim() {
                        g.set_sym(k, j, Rational::zero());
                    }
                }
            }
            for k in 0..g.dim() {
                if !snapped[b][k] && !shifts[b][k].is_zero() {
                    g.add_sym(k, k, &shifts[b][k]);
                }
            }
        }
        let mut free = rounded_free.to_vec();

        // Partition rows: those with a live absorber cell get projected;
        // the rest must be satisfied by the free scalars exactly.
        let live = |d: &DecisionId| -> bool {
            matches!(*d, DecisionId::Cell { block, row, col }
                if block == absorber && !snapped[absorber][row] && !snapped[absorber][col])
        };
        let mut repair_rows: Vec<usize> = Vec::new();
        for (idx, row) in builder.rows.iter().enumerate() {
            if !row.coeffs.keys().any(live) {
                repair_rows.push(idx);
            }
        }
        repair_dead_rows_exact(builder, &mut grams, absorber, &snapped, &mut free, &repair_rows)?;

        // Absorb the remaining residuals row by row. Within a row the
        // correction is the minimum-norm update over its live cells.
        for row in &builder.rows {
            let cells: Vec<(usize, usize, Rational)> = row
                .coeffs
                .iter()
                .filter_map(|(d, c)| match *d {
                    DecisionId::Cell { block, row: i, col: j }
                        if block == absorber && !snapped[absorber][i] && !snapped[absorber][j] =>
                    {
                        Some((i, j, c.clone()))
                    }
                    _ => None,
                })
                .collect();
            if cells.is_empty() {
                continue;
            }
            let mut value = Rational::zero();
            for (d, c) in &row.coeffs {
                match *d {
                    DecisionId::Free(k) => value += c * &free[k],
                    DecisionId::Cell { block, row: i, col: j } => {
                        value += c * grams[block].get(i, j);
                    }
                }
            }
            let residual = &row.rhs - &value;
            if residual.is_zero() {
                continue;
            }
            let norm2: Rational = cells.iter().map(|(_, _, c)| c * c).sum();
            for (i, j, c) in &cells {
                let delta = &residual * c / &norm2;
                grams[absorber].add_sym(*i, *j, &delta);
            }
        }

        let candidate = RationalSolution {
            grams: grams.clone(),
            free,
        };
        // Exact re-check of every row; any residual here is a logic error
        // surfaced honestly rather than silently shipped.
        for (idx, row) in builder.rows.iter().enumerate() {
            let mut value = Rational::zero();
            for (d, c) in &row.coeffs {
                value += c * &candidate.value(*d)?;
            }
            if value != row.rhs {
                return Err(SosError::Rationalize(format!(
                    "row {idx} still has a nonzero residual after repair"
                )));
            }
        }

        // PSD floor check. A failure is classified adaptively: when the
        // offending eigenvector concentrates on a live diagonal that is
        // itself tiny, the identity forces that direction to zero and the
        // float solve merely approached the face, so the index is snapped
        // and the level redone (bounded by the total dimension, so this
        // costs nothing against the repair budget). Otherwise the failure
        // is honest rounding noise and a diagonal shift regularizes it,
        // paid for from the repair budget.
        let mut worst: Option<(usize, f64)> = None;
        for (b, g) in candidate.grams.iter().enumerate() {
            let min_eig = g.min_eigenvalue_f64();
            if min_eig < options.psd_floor && worst.map_or(true, |(_, w)| min_eig < w) {
                worst = Some((b, min_eig));
            }
        }
        let (b, eig) = match worst {
            None => return Ok(candidate),
            Some(w) => w,
        };
        last_floor_failure =
            format!("block '{}' min eigenvalue {eig:.3e}", builder.blocks[b].name);
        let se = candidate.grams[b].to_f64().symmetric_eigen();
        let mut arg = 0usize;
        for k in 1..se.eigenvalues.len() {
            if se.eigenvalues[k] < se.eigenvalues[arg] {
                arg = k;
            }
        }
        let vector = se.eigenvectors.column(arg);
        let mut dom: Option<usize> = None;
        for k in 0..candidate.grams[b].dim() {
            if !snapped[b][k] && dom.map_or(true, |d| vector[k].abs() > vector[d].abs()) {
                dom = Some(k);
            }
        }
        let dom = dom.ok_or_else(|| {
            SosError::Rationalize(format!(
                "block '{}' fails the PSD floor with every index snapped",
                builder.blocks[b].name
            ))
        })?;
        let diag = candidate.grams[b].get(dom, dom).to_f64().unwrap_or(f64::NAN);
        if diag.abs() <= 100.0 * eig.abs() {
            snapped[b][dom] = true;
        } else {
            if shift_budget == 0 {
                break;
            }
            shift_budget -= 1;
            let shift = approx_rational(2.0 * eig.abs().max(1e-12), 1_000_000_000);
            for k in 0..candidate.grams[b].dim() {
                if !snapped[b][k] {
                    shifts[b][k] += &shift;
                }
            }
        }
    }
    Err(SosError::Rationalize(format!(
        "PSD repair budget exhausted at snap level {level:.1e} ({last_floor_failure})"
    )))
}

/// Exactly satisfy the rows that have no live absorber cell. Unknowns are
/// every free scalar plus every live cell of a non-absorber block that
/// appears in one of these rows; the minimum-norm correction (in exact
/// arithmetic) projects the rounded values onto the affine set the rows
/// define. Rows that retain a live absorber cell are handled afterwards by
/// the absorber itself, so perturbing their frozen contributions is safe.
fn repair_dead_rows_exact(
    builder: &SdpBuilder,
    grams: &mut [RationalMatrix],
    absorber: usize,
    snapped: &[Vec<bool>],
    free: &mut [Rational],
    rows: &[usize],
) -> Result<(), SosError> {
    // Enumerate the adjustable decisions appearing in the dead rows.
    let adjustable = |d: &DecisionId| -> bool {
        match *d {
            DecisionId::Free(_) => true,
            DecisionId::Cell { block, row, col } => {
                block != absorber && !snapped[block][row] && !snapped[block][col]
            }
        }
    };
    let mut columns: BTreeMap<DecisionId, usize> = BTreeMap::new();
    for &idx in rows {
        for d in builder.rows[idx].coeffs.keys() {
            if adjustable(d) && !columns.contains_key(d) {
                let col = columns.len();
                columns.insert(*d, col);
            }
        }
    }
    let p = columns.len();
    let current = |d: &DecisionId, grams: &[RationalMatrix], free: &[Rational]| match *d {
        DecisionId::Free(k) => free[k].clone(),
        DecisionId::Cell { block, row: i, col: j } => grams[block].get(i, j).clone(),
    };

    // Equation per dead row over the adjustable columns, frozen cells
    // folded into the right-hand side.
    let mut sys: Vec<(usize, Vec<Rational>, Rational)> = Vec::new();
    for &idx in rows {
        let row = &builder.rows[idx];
        let mut coeffs = vec![Rational::zero(); p];
        let mut rhs = row.rhs.clone();
        let mut any = false;
        for (d, c) in &row.coeffs {
            if let Some(&col) = columns.get(d) {
                coeffs[col] = c.clone();
                any = true;
            } else {
                rhs -= c * &current(d, grams, free);
            }
        }
        if !any {
            if !rhs.is_zero() {
                return Err(SosError::Rationalize(format!(
                    "row {idx} has no adjustable decision left but residual {rhs}"
                )));
            }
            continue;
        }
        sys.push((idx, coeffs, rhs));
    }
    if sys.is_empty() {
        return Ok(());
    }
    // Drop exactly dependent rows (checking right-hand-side consistency).
    let mut echelon: Vec<(Vec<Rational>, Rational)> = Vec::new();
    for (idx, mut v, mut r) in sys {
        for (e, er) in &echelon {
            let pivot_col = e.iter().position(|c| !c.is_zero()).expect("echelon row");
            if !v[pivot_col].is_zero() {
                let f = &v[pivot_col] / &e[pivot_col];
                for (vc, ec) in v.iter_mut().zip(e) {
                    let d = &f * ec;
                    *vc = &*vc - &d;
                }
                r -= &f * er;
            }
        }
        if v.iter().all(|c| c.is_zero()) {
            if !r.is_zero() {
                return Err(SosError::Rationalize(format!(
                    "dependent repair rows are mutually inconsistent (row {idx}, residual {r})"
                )));
            }
        } else {
            echelon.push((v, r));
        }
    }
    if echelon.is_empty() {
        return Ok(());
    }
    // Minimum-norm correction: u = û − Aᵀλ with (A Aᵀ) λ = A û − c.
    let k = echelon.len();
    let u_hat: Vec<Rational> = {
        let mut u = vec![Rational::zero(); p];
        for (d, &col) in &columns {
            u[col] = current(d, grams, free);
        }
        u
    };
    let mut normal = vec![vec![Rational::zero(); k]; k];
    let mut rhs = vec![Rational::zero(); k];
    for i in 0..k {
        for j in 0..k {
            let mut acc = Rational::zero();
            for t in 0..p {
                acc += &echelon[i].0[t] * &echelon[j].0[t];
            }
            normal[i][j] = acc;
        }
        let mut au = Rational::zero();
        for t in 0..p {
            au += &echelon[i].0[t] * &u_hat[t];
        }
        rhs[i] = au - &echelon[i].1;
    }
    let lambda = solve_rational(normal, rhs).ok_or_else(|| {
        SosError::Rationalize("repair normal equations are singular".into())
    })?;
    for (d, &col) in &columns {
        let mut corr = Rational::zero();
        for i in 0..k {
            corr += &lambda[i] * &echelon[i].0[col];
        }
        if corr.is_zero() {
            continue;
        }
        match *d {
            DecisionId::Free(t) => free[t] = &free[t] - &corr,
            DecisionId::Cell { block, row: i, col: j } => {
                let delta = -corr;
                grams[block].add_sym(i, j, &delta);
            }
        }
    }
    Ok(())
}

/// Exact Gaussian elimination; returns None when the matrix is singular.
fn solve_rational(mut a: Vec<Vec<Rational>>, mut b: Vec<Rational>) -> Option<Vec<Rational>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = &a[r][col] / &a[col][col];
                for c in col..n {
                    let d = &f * &a[col][c];
                    a[r][c] = &a[r][c] - &d;
                }
                let d = &f * &b[col];
                b[r] = &b[r] - &d;
            }
        }
    }
    Some(
        (0..n)
            .map(|i| &b[i] / &a[i][i])
            .collect(),
    )
}

/// One verified piece of an SOS certificate: a polynomial, its Gram
/// matrix, and the basis tying them together.
#[derive(Debug, Clone)]
pub struct SosCertificateItem {
    pub name: String,
    pub polynomial: Polynomial,
    pub basis: Vec<Monomial>,
    pub gram: RationalMatrix,
}

/// Build the certificate item for one Gram block of a rational solution.
pub fn certificate_item(
    builder: &SdpBuilder,
    block: usize,
    solution: &RationalSolution,
) -> Result<SosCertificateItem, SosError> {
    let basis = builder
        .block_basis(block)
        .ok_or(SosError::BlockIndex {
            index: block,
            blocks: builder.block_count(),
        })?
        .to_vec();
    let gram = solution
        .grams
        .get(block)
        .cloned()
        .ok_or(SosError::BlockIndex {
            index: block,
            blocks: solution.grams.len(),
        })?;
    let polynomial = gram.quadratic_form(&basis)?;
    Ok(SosCertificateItem {
        name: builder.block_name(block).unwrap_or("gram").to_string(),
        polynomial,
        basis,
        gram,
    })
}

/// The identity a certificate claims: `target = Σ weight_k · item_k`.
#[derive(Debug, Clone)]
pub struct SosIdentity {
    pub weights: Vec<Polynomial>,
    pub target: Polynomial,
}

/// Residual tolerance on the assembled identity's coefficients.
fn residual_tolerance() -> Rational {
    rat(1, 1_000_000)
}

/// Eigenvalue floor accepted as PSD in the floating-point check.
pub const PSD_EIG_FLOOR: f64 = -1e-9;

/// Outcome of [`verify_certificate`].
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub pass: bool,
    /// ∞-norm of the identity residual's coefficients (exact).
    pub residual_inf_norm: Rational,
    /// Per-item minimum Gram eigenvalue (float check).
    pub item_min_eigs: Vec<f64>,
    pub failures: Vec<String>,
}

/// Re-derive everything a certificate claims, from scratch.
///
/// Checks, per item, that the stated polynomial equals `basisᵀ·Gram·basis`
/// in exact rational arithmetic and that the Gram matrix passes the
/// floating-point PSD floor; then checks that `Σ weight_k · polynomial_k`
/// matches the target with residual coefficients of ∞-norm ≤ 1e−6.
pub fn verify_certificate(items: &[SosCertificateItem], identity: &SosIdentity) -> VerifyReport {
    let mut failures = Vec::new();
    let mut item_min_eigs = Vec::with_capacity(items.len());
    if identity.weights.len() != items.len() {
        failures.push(format!(
            "identity carries {} weights for {} items",
            identity.weights.len(),
            items.len()
        ));
    }
    for item in items {
        match item.gram.quadratic_form(&item.basis) {
            Ok(p) => {
                if p != item.polynomial {
                    failures.push(format!(
                        "item '{}': stated polynomial differs from its Gram form",
                        item.name
                    ));
                }
            }
            Err(e) => failures.push(format!("item '{}': {e}", item.name)),
        }
        let min_eig = item.gram.min_eigenvalue_f64();
        item_min_eigs.push(min_eig);
        if min_eig < PSD_EIG_FLOOR {
            failures.push(format!(
                "item '{}': Gram minimum eigenvalue {min_eig:.3e} below the PSD floor",
                item.name
            ));
        }
    }
    let mut assembled = Polynomial::zero(identity.target.arity());
    let mut assembly_ok = true;
    for (item, w) in items.iter().zip(&identity.weights) {
        match item.polynomial.mul(w).and_then(|p| assembled.add(&p)) {
            Ok(s) => assembled = s,
            Err(e) => {
                failures.push(format!("item '{}': {e}", item.name));
                assembly_ok = false;
            }
        }
    }
    let residual_inf_norm = if assembly_ok {
        match assembled.sub(&identity.target) {
            Ok(residual) => residual.coeff_inf_norm(),
            Err(e) => {
                failures.push(e.to_string());
                rat(1, 1)
            }
        }
    } else {
        rat(1, 1)
    };
    if residual_inf_norm > residual_tolerance() {
        failures.push(format!(
            "identity residual ∞-norm {residual_inf_norm} exceeds 1/1000000"
        ));
    }
    VerifyReport {
        pass: failures.is_empty(),
        residual_inf_norm,
        item_min_eigs,
        failures,
    }
}

/// Canonical text for one monomial (the display of a unit-coefficient term).
pub fn monomial_text(m: &Monomial) -> String {
    // Reuse the polynomial display for a single unit-coefficient term.
    Polynomial::from_terms(m.arity(), vec![(m.clone(), rat(1, 1))])
        .expect("unit term is well-formed")
        .to_string()
}

/// Write a self-contained certificate as structured text: every item's
/// basis and rational Gram matrix, the identity weights, and the target.
pub fn write_certificate(
    w: &mut impl std::io::Write,
    items: &[SosCertificateItem],
    identity: &SosIdentity,
) -> std::io::Result<()> {
    writeln!(w, "sos-certificate v1")?;
    writeln!(w, "arity {}", identity.target.arity())?;
    writeln!(w, "items {}", items.len())?;
    for (item, weight) in items.iter().zip(&identity.weights) {
        writeln!(w, "item {}", item.name)?;
        writeln!(w, "weight {}", weight)?;
        writeln!(w, "basis {}", item.basis.len())?;
        for m in &item.basis {
            writeln!(w, "{}", monomial_text(m))?;
        }
        let mut cells = String::new();
        let mut count = 0usize;
        for i in 0..item.gram.dim() {
            for j in i..item.gram.dim() {
                let v = item.gram.get(i, j);
                if !v.is_zero() {
                    writeln!(&mut cells, "{i} {j} {v}").expect("string write");
                    count += 1;
                }
            }
        }
        writeln!(w, "gram {} {}", item.gram.dim(), count)?;
        w.write_all(cells.as_bytes())?;
        writeln!(w, "enditem")?;
    }
    writeln!(w, "target {}", identity.target)?;
    Ok(())
}

/// Parse a certificate written by [`write_certificate`].
pub fn read_certificate(text: &str) -> Result<(Vec<SosCertificateItem>, SosIdentity), SosError> {
    let mut lines = text.lines().enumerate();
    let fail = |line: usize, reason: &str| SosError::Parse {
        line: line + 1,
        reason: reason.to_string(),
    };
    let mut next_line = |expect: &str| -> Result<(usize, String), SosError> {
        lines
            .next()
            .map(|(n, l)| (n, l.to_string()))
            .ok_or_else(|| SosError::Parse {
                line: 0,
                reason: format!("unexpected end of file, expected {expect}"),
            })
    };
    let (n, header) = next_line("header")?;
    if header.trim() != "sos-certificate v1" {
        return Err(fail(n, "expected header 'sos-certificate v1'"));
    }
    let (n, arity_line) = next_line("arity")?;
    let arity: usize = arity_line
        .strip_prefix("arity ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| fail(n, "expected 'arity <n>'"))?;
    let (n, items_line) = next_line("items")?;
    let count: usize = items_line
        .strip_prefix("items ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| fail(n, "expected 'items <n>'"))?;
    let mut items = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, item_line) = next_line("item")?;
        let name = item_line
            .strip_prefix("item ")
            .ok_or_else(|| fail(n, "expected 'item <name>'"))?
            .trim()
            .to_string();
        let (n, weight_line) = next_line("weight")?;
        let weight_text = weight_line
            .strip_prefix("weight ")
            .ok_or_else(|| fail(n, "expected 'weight <polynomial>'"))?;
        let weight = Polynomial::parse(weight_text, arity)
            .map_err(|e| fail(n, &format!("bad weight polynomial: {e}")))?;
        let (n, basis_line) = next_line("basis")?;
        let basis_len: usize = basis_line
            .strip_prefix("basis ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| fail(n, "expected 'basis <n>'"))?;
        let mut basis = Vec::with_capacity(basis_len);
        for _ in 0..basis_len {
            let (n, mono_line) = next_line("basis monomial")?;
            let p = Polynomial::parse(&mono_line, arity)
                .map_err(|e| fail(n, &format!("bad basis monomial: {e}")))?;
            let mut terms = p.terms();
            let mono = match (terms.next(), terms.next()) {
                (Some((m, c)), None) if *c == rat(1, 1) => m.clone(),
                _ => return Err(fail(n, "basis line must be a single unit monomial")),
            };
            basis.push(mono);
        }
        let (n, gram_line) = next_line("gram")?;
        let rest = gram_line
            .strip_prefix("gram ")
            .ok_or_else(|| fail(n, "expected 'gram <dim> <cells>'"))?;
        let mut parts = rest.split_whitespace();
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(n, "bad gram dimension"))?;
        let cells: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(n, "bad gram cell count"))?;
        if dim != basis_len {
            return Err(fail(n, "gram dimension differs from basis length"));
        }
        let mut gram = RationalMatrix::zeros(dim);
        for _ in 0..cells {
            let (n, cell_line) = next_line("gram cell")?;
            let mut f = cell_line.split_whitespace();
            let parse_idx = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok());
            let (i, j) = match (parse_idx(f.next()), parse_idx(f.next())) {
                (Some(i), Some(j)) if i < dim && j < dim => (i, j),
                _ => return Err(fail(n, "bad gram cell indices")),
            };
            let v: Rational = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(n, "bad gram cell value"))?;
            gram.set_sym(i, j, v);
        }
        let (n, end_line) = next_line("enditem")?;
        if end_line.trim() != "enditem" {
            return Err(fail(n, "expected 'enditem'"));
        }
        let polynomial = gram
            .quadratic_form(&basis)
            .map_err(|e| fail(n, &format!("gram form: {e}")))?;
        items.push(SosCertificateItem {
            name,
            polynomial,
            basis,
            gram,
        });
        weights.push(weight);
    }
    let (n, target_line) = next_line("target")?;
    let target_text = target_line
        .strip_prefix("target ")
        .ok_or_else(|| fail(n, "expected 'target <polynomial>'"))?;
    let target = Polynomial::parse(target_text, arity)
        .map_err(|e| fail(n, &format!("bad target polynomial: {e}")))?;
    Ok((items, SosIdentity { weights, target }))
}
