//! Sparse multivariate polynomial algebra over exact rationals.
//!
//! Every certificate object in this crate — dynamics, Lyapunov candidates,
//! multipliers, Gram expansions — is a [`Polynomial`]: a map from
//! [`Monomial`] exponent vectors to `BigRational` coefficients with a fixed
//! variable arity. Arithmetic is exact; floating point only enters through
//! [`Polynomial::evaluate`] and the compiled [`PolyF64`] view used in
//! simulation hot loops.
//!
//! Terms are kept in graded lexicographic order (total degree first, then
//! exponents), which makes serialization deterministic and Gram-basis
//! indexing stable.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Exact coefficient type used throughout certification.
pub type Rational = BigRational;

/// Convenience constructor for small rational constants.
pub fn rat(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

/// Errors from polynomial construction and arithmetic.
#[derive(Debug, Error)]
pub enum PolyError {
    #[error("arity mismatch: expected {expected} variables, found {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("variable index {index} out of range for arity {arity}")]
    IndexOutOfRange { index: usize, arity: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("point length {found} does not match arity {expected}")]
    PointLength { expected: usize, found: usize },
    #[error("parse error: {0}")]
    Parse(String),
}

/// A power product of variables, stored as one exponent per variable.
///
/// The ordering is graded lexicographic: lower total degree sorts first,
/// ties are broken by the exponent vector's natural lexicographic order
/// (so within a degree, powers of `x1` sort after mixed terms — iterating
/// a term map in reverse yields the conventional "leading term first"
/// reading order).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    exponents: Vec<u32>,
}

impl Monomial {
    /// Monomial with the given exponent per variable.
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial { exponents }
    }

    /// The constant monomial `1` over `arity` variables.
    pub fn unit(arity: usize) -> Self {
        Monomial {
            exponents: vec![0; arity],
        }
    }

    /// Single variable `x_{index+1}` (zero-based index) over `arity` variables.
    pub fn variable(arity: usize, index: usize) -> Result<Self, PolyError> {
        if index >= arity {
            return Err(PolyError::IndexOutOfRange {
                index,
                arity,
            });
        }
        let mut exponents = vec![0; arity];
        exponents[index] = 1;
        Ok(Monomial { exponents })
    }

    /// Number of variables this monomial ranges over.
    pub fn arity(&self) -> usize {
        self.exponents.len()
    }

    /// Total degree (sum of exponents).
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    /// Exponent of variable `index`.
    pub fn exponent(&self, index: usize) -> u32 {
        self.exponents[index]
    }

    /// All exponents, one per variable.
    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    /// Product of two monomials of equal arity.
    pub fn mul(&self, other: &Monomial) -> Result<Monomial, PolyError> {
        if self.arity() != other.arity() {
            return Err(PolyError::ArityMismatch {
                expected: self.arity(),
                found: other.arity(),
            });
        }
        Ok(Monomial {
            exponents: self
                .exponents
                .iter()
                .zip(&other.exponents)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.exponents.cmp(&other.exponents))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Sparse polynomial with exact rational coefficients and fixed arity.
///
/// Zero coefficients are never stored, so structural equality coincides
/// with mathematical equality for equal arities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Polynomial {
    arity: usize,
    terms: BTreeMap<Monomial, Rational>,
}

impl Polynomial {
    /// The zero polynomial over `arity` variables.
    pub fn zero(arity: usize) -> Self {
        Polynomial {
            arity,
            terms: BTreeMap::new(),
        }
    }

    /// A constant polynomial.
    pub fn constant(arity: usize, value: Rational) -> Self {
        let mut terms = BTreeMap::new();
        if !value.is_zero() {
            terms.insert(Monomial::unit(arity), value);
        }
        Polynomial { arity, terms }
    }

    /// The single variable `x_{index+1}` as a polynomial.
    pub fn variable(arity: usize, index: usize) -> Result<Self, PolyError> {
        let m = Monomial::variable(arity, index)?;
        let mut terms = BTreeMap::new();
        terms.insert(m, Rational::one());
        Ok(Polynomial { arity, terms })
    }

    /// Build from `(monomial, coefficient)` pairs; zero coefficients are
    /// dropped, repeated monomials are summed.
    pub fn from_terms<I>(arity: usize, iter: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Monomial, Rational)>,
    {
        let mut terms: BTreeMap<Monomial, Rational> = BTreeMap::new();
        for (m, c) in iter {
            if m.arity() != arity {
                return Err(PolyError::ArityMismatch {
                    expected: arity,
                    found: m.arity(),
                });
            }
            let entry = terms.entry(m).or_insert_with(Rational::zero);
            *entry += c;
        }
        terms.retain(|_, c| !c.is_zero());
        Ok(Polynomial { arity, terms })
    }

    /// Number of variables.
    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// True iff no terms are stored.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Term iterator in ascending graded-lex order.
    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Rational)> {
        self.terms.iter()
    }

    /// Number of stored terms.
    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Coefficient of `m` (zero when absent).
    pub fn coefficient(&self, m: &Monomial) -> Rational {
        self.terms.get(m).cloned().unwrap_or_else(Rational::zero)
    }

    fn check_arity(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.arity != other.arity {
            return Err(PolyError::ArityMismatch {
                expected: self.arity,
                found: other.arity,
            });
        }
        Ok(())
    }

    /// Coefficient-wise sum.
    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_arity(other)?;
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            let entry = terms.entry(m.clone()).or_insert_with(Rational::zero);
            *entry += c;
        }
        terms.retain(|_, c| !c.is_zero());
        Ok(Polynomial {
            arity: self.arity,
            terms,
        })
    }

    /// Coefficient-wise difference `self − other`.
    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.add(&other.neg())
    }

    /// Negation.
    pub fn neg(&self) -> Polynomial {
        Polynomial {
            arity: self.arity,
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (m.clone(), -c.clone()))
                .collect(),
        }
    }

    /// Multiply every coefficient by a rational scalar.
    pub fn scale(&self, factor: &Rational) -> Polynomial {
        if factor.is_zero() {
            return Polynomial::zero(self.arity);
        }
        Polynomial {
            arity: self.arity,
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (m.clone(), c * factor))
                .collect(),
        }
    }

    /// Distributed product.
    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_arity(other)?;
        let mut terms: BTreeMap<Monomial, Rational> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let m = ma.mul(mb)?;
                let entry = terms.entry(m).or_insert_with(Rational::zero);
                *entry += ca * cb;
            }
        }
        terms.retain(|_, c| !c.is_zero());
        Ok(Polynomial {
            arity: self.arity,
            terms,
        })
    }

    /// Formal partial derivative with respect to variable `var_index`.
    pub fn differentiate(&self, var_index: usize) -> Result<Polynomial, PolyError> {
        if var_index >= self.arity {
            return Err(PolyError::IndexOutOfRange {
                index: var_index,
                arity: self.arity,
            });
        }
        let mut terms: BTreeMap<Monomial, Rational> = BTreeMap::new();
        for (m, c) in &self.terms {
            let e = m.exponent(var_index);
            if e == 0 {
                continue;
            }
            let mut exps = m.exponents().to_vec();
            exps[var_index] -= 1;
            terms.insert(Monomial::new(exps), c * rat(e as i64, 1));
        }
        Ok(Polynomial {
            arity: self.arity,
            terms,
        })
    }

    /// Numeric evaluation by direct term summation with Kahan compensation.
    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.arity {
            return Err(PolyError::PointLength {
                expected: self.arity,
                found: point.len(),
            });
        }
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (m, c) in &self.terms {
            let mut term = c.to_f64().unwrap_or(f64::NAN);
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    term *= point[i].powi(e as i32);
                }
            }
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        Ok(sum)
    }

    /// Exact evaluation at a rational point.
    pub fn evaluate_rational(&self, point: &[Rational]) -> Result<Rational, PolyError> {
        if point.len() != self.arity {
            return Err(PolyError::PointLength {
                expected: self.arity,
                found: point.len(),
            });
        }
        let mut sum = Rational::zero();
        for (m, c) in &self.terms {
            let mut term = c.clone();
            for (i, &e) in m.exponents().iter().enumerate() {
                for _ in 0..e {
                    term *= &point[i];
                }
            }
            sum += term;
        }
        Ok(sum)
    }

    /// Exact composition: every variable of `self` is replaced by its
    /// assigned polynomial. All assignments must be present and share one
    /// target arity.
    pub fn substitute(
        &self,
        assignments: &BTreeMap<usize, Polynomial>,
    ) -> Result<Polynomial, PolyError> {
        let target_arity = match assignments.values().next() {
            Some(p) => p.arity(),
            None => {
                // No variables assigned: legal only for constants.
                if self.terms.keys().all(|m| m.degree() == 0) {
                    return Ok(self.clone());
                }
                return Err(PolyError::DimensionMismatch(
                    "substitute requires an assignment for every variable".into(),
                ));
            }
        };
        for (i, p) in assignments {
            if *i >= self.arity {
                return Err(PolyError::IndexOutOfRange {
                    index: *i,
                    arity: self.arity,
                });
            }
            if p.arity() != target_arity {
                return Err(PolyError::ArityMismatch {
                    expected: target_arity,
                    found: p.arity(),
                });
            }
        }
        let mut result = Polynomial::zero(target_arity);
        for (m, c) in &self.terms {
            let mut term = Polynomial::constant(target_arity, c.clone());
            for (i, &e) in m.exponents().iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let replacement = assignments.get(&i).ok_or_else(|| {
                    PolyError::DimensionMismatch(format!(
                        "no assignment for variable x{} with nonzero exponent",
                        i + 1
                    ))
                })?;
                for _ in 0..e {
                    term = term.mul(replacement)?;
                }
            }
            result = result.add(&term)?;
        }
        Ok(result)
    }

    /// Re-index variables into a wider space: variable `i` of `self` becomes
    /// variable `var_map[i]` of the result. A cheap exact special case of
    /// [`Polynomial::substitute`] used to splice `x`, `x_d`, `y` blocks into
    /// one polynomial ring.
    pub fn lift_vars(&self, target_arity: usize, var_map: &[usize]) -> Result<Polynomial, PolyError> {
        if var_map.len() != self.arity {
            return Err(PolyError::DimensionMismatch(format!(
                "variable map covers {} of {} variables",
                var_map.len(),
                self.arity
            )));
        }
        for &t in var_map {
            if t >= target_arity {
                return Err(PolyError::IndexOutOfRange {
                    index: t,
                    arity: target_arity,
                });
            }
        }
        let mut terms = BTreeMap::new();
        for (m, c) in &self.terms {
            let mut exps = vec![0u32; target_arity];
            for (i, &e) in m.exponents().iter().enumerate() {
                exps[var_map[i]] += e;
            }
            terms.insert(Monomial::new(exps), c.clone());
        }
        Ok(Polynomial {
            arity: target_arity,
            terms,
        })
    }

    /// Largest absolute coefficient, as a rational (zero for the zero
    /// polynomial). Used for residual norms in exact verification.
    pub fn coeff_inf_norm(&self) -> Rational {
        self.terms
            .values()
            .map(|c| c.abs())
            .max()
            .unwrap_or_else(Rational::zero)
    }

    /// Parse the crate's polynomial text format (see [`fmt::Display`]).
    ///
    /// Grammar, whitespace-tolerant: terms joined by `+` or `-`; each term
    /// is a rational coefficient (`p` or `p/q`, optionally negative),
    /// optionally followed by `*` and variable factors `xK` or `xK^A`
    /// (1-based `K`); a term may also be a bare variable product with
    /// implied coefficient 1. Negative denominators are not supported —
    /// write `-3/4`, not `3/-4`.
    pub fn parse(text: &str, arity: usize) -> Result<Polynomial, PolyError> {
        // Split into signed chunks: '-' is unary when nothing of the
        // current term has been seen yet, a subtraction otherwise.
        let mut chunks: Vec<(i32, String)> = Vec::new();
        let mut current = String::new();
        let mut sign = 1i32;
        let mut flush = |sign: &mut i32, current: &mut String| -> Result<(), PolyError> {
            if current.trim().is_empty() {
                return Err(PolyError::Parse("empty term between signs".into()));
            }
            chunks.push((*sign, std::mem::take(current)));
            *sign = 1;
            Ok(())
        };
        for ch in text.chars() {
            match ch {
                '+' => flush(&mut sign, &mut current)?,
                '-' => {
                    if current.trim().is_empty() {
                        sign = -sign;
                    } else {
                        flush(&mut sign, &mut current)?;
                        sign = -1;
                    }
                }
                _ => current.push(ch),
            }
        }
        flush(&mut sign, &mut current)?;
        let mut terms: Vec<(Monomial, Rational)> = Vec::new();
        for (sign, chunk) in chunks {
            let (m, c) = parse_term(chunk.trim(), arity)?;
            terms.push((m, if sign < 0 { -c } else { c }));
        }
        Polynomial::from_terms(arity, terms)
    }
}

fn parse_rational(tok: &str) -> Result<Rational, PolyError> {
    let (num_str, den_str) = match tok.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (tok.trim(), "1"),
    };
    let num: BigInt = num_str
        .parse()
        .map_err(|_| PolyError::Parse(format!("invalid integer '{num_str}'")))?;
    let den: BigInt = den_str
        .parse()
        .map_err(|_| PolyError::Parse(format!("invalid integer '{den_str}'")))?;
    if den.is_zero() {
        return Err(PolyError::Parse(format!("zero denominator in '{tok}'")));
    }
    Ok(Rational::new(num, den))
}

fn parse_term(term: &str, arity: usize) -> Result<(Monomial, Rational), PolyError> {
    let mut coeff = Rational::one();
    let mut exps = vec![0u32; arity];
    let mut saw_coeff = false;
    for tok in term.split(|c: char| c == '*' || c.is_whitespace()) {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        if let Some(rest) = tok.strip_prefix('x') {
            let (idx_str, exp_str) = match rest.split_once('^') {
                Some((i, e)) => (i, e),
                None => (rest, "1"),
            };
            let idx: usize = idx_str
                .parse()
                .map_err(|_| PolyError::Parse(format!("invalid variable '{tok}'")))?;
            let exp: u32 = exp_str
                .parse()
                .map_err(|_| PolyError::Parse(format!("invalid exponent in '{tok}'")))?;
            if idx == 0 || idx > arity {
                return Err(PolyError::Parse(format!(
                    "variable x{idx} out of range 1..={arity}"
                )));
            }
            exps[idx - 1] += exp;
        } else {
            if saw_coeff {
                return Err(PolyError::Parse(format!(
                    "unexpected second coefficient '{tok}'"
                )));
            }
            coeff = parse_rational(tok)?;
            saw_coeff = true;
        }
    }
    Ok((Monomial::new(exps), coeff))
}

impl fmt::Display for Polynomial {
    /// Canonical text form: descending graded-lex terms joined by ` + `,
    /// coefficients always as `p/q`, variables always as `xK^A`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{}/{}", c.numer(), c.denom())?;
            let mut first_var = true;
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    write!(f, "{}x{}^{}", if first_var { " * " } else { " " }, i + 1, e)?;
                    first_var = false;
                }
            }
        }
        Ok(())
    }
}

/// Itô infinitesimal generator applied to a state function.
///
/// For drift `f` (each component a polynomial in the `2n` variables
/// `(x, x_d)`), diffusion `g` (components in the `n` variables `x`), and a
/// state function `V0` in `x`, returns
///
/// ```text
/// (∇V0)ᵀ f  +  ½ gᵀ (Hess V0) g
/// ```
///
/// as a polynomial in `(x, x_d)`. Diffusion scaling conventions (such as a
/// measurement-efficiency prefactor applied to `g`) are the caller's
/// responsibility; the Hessian term is quadratic in `g`, so a scale `s` on
/// `g` multiplies that term by `s²`.
pub fn apply_generator(
    v0: &Polynomial,
    f: &[Polynomial],
    g: &[Polynomial],
) -> Result<Polynomial, PolyError> {
    let n = v0.arity();
    if n == 0 || f.len() != n || g.len() != n {
        return Err(PolyError::DimensionMismatch(format!(
            "state dimension {} with {} drift and {} diffusion components",
            n,
            f.len(),
            g.len()
        )));
    }
    let wide = 2 * n;
    for fi in f {
        if fi.arity() != wide {
            return Err(PolyError::ArityMismatch {
                expected: wide,
                found: fi.arity(),
            });
        }
    }
    for gi in g {
        if gi.arity() != n {
            return Err(PolyError::ArityMismatch {
                expected: n,
                found: gi.arity(),
            });
        }
    }
    let x_map: Vec<usize> = (0..n).collect();
    let mut result = Polynomial::zero(wide);
    for i in 0..n {
        let dv = v0.differentiate(i)?.lift_vars(wide, &x_map)?;
        result = result.add(&dv.mul(&f[i])?)?;
    }
    let half = rat(1, 2);
    for i in 0..n {
        let gi = g[i].lift_vars(wide, &x_map)?;
        for j in 0..n {
            let hij = v0
                .differentiate(i)?
                .differentiate(j)?
                .lift_vars(wide, &x_map)?;
            if hij.is_zero() {
                continue;
            }
            let gj = g[j].lift_vars(wide, &x_map)?;
            result = result.add(&hij.mul(&gi)?.mul(&gj)?.scale(&half))?;
        }
    }
    Ok(result)
}

/// Float-compiled polynomial for evaluation-heavy loops.
///
/// Coefficients and exponent rows are flattened once; evaluation is direct
/// term summation with Kahan compensation, matching
/// [`Polynomial::evaluate`] on the same input.
#[derive(Debug, Clone)]
pub struct PolyF64 {
    arity: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl PolyF64 {
    /// Number of variables.
    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Evaluate at a point of matching length.
    pub fn evaluate(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.arity);
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (exps, c) in &self.terms {
            let mut term = *c;
            for (i, &e) in exps.iter().enumerate() {
                if e > 0 {
                    term *= point[i].powi(e as i32);
                }
            }
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum
    }
}

impl From<&Polynomial> for PolyF64 {
    fn from(p: &Polynomial) -> Self {
        PolyF64 {
            arity: p.arity(),
            terms: p
                .terms()
                .map(|(m, c)| (m.exponents().to_vec(), c.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(text: &str, arity: usize) -> Polynomial {
        Polynomial::parse(text, arity).unwrap()
    }

    #[test]
    fn add_cancels_terms() {
        // (x² + y) + (−y) = x²
        let a = p("x1^2 + x2", 2);
        let b = p("-1 * x2", 2);
        assert_eq!(a.add(&b).unwrap(), p("x1^2", 2));
    }

    #[test]
    fn add_identity_and_shift() {
        let q = p("3/2 * x1^2 x2 + -1 * x1", 2);
        assert_eq!(q.add(&Polynomial::zero(2)).unwrap(), q);
        // (x+1) + (x−1) = 2x
        let a = p("x1 + 1", 1);
        let b = p("x1 + -1", 1);
        assert_eq!(a.add(&b).unwrap(), p("2 * x1", 1));
    }

    #[test]
    fn mul_difference_of_squares() {
        let a = p("x1 + x2", 2);
        let b = p("x1 + -1 * x2", 2);
        assert_eq!(a.mul(&b).unwrap(), p("x1^2 + -1 * x2^2", 2));
    }

    #[test]
    fn mul_identity() {
        let q = p("x1^3 + -2/7 * x1 x2 + 5", 2);
        let one = Polynomial::constant(2, rat(1, 1));
        assert_eq!(q.mul(&one).unwrap(), q);
    }

    #[test]
    fn mul_builds_domain_polynomial() {
        // x1·(x1−1) + x2² — the working domain's defining polynomial.
        let x1 = p("x1", 2);
        let x1m1 = p("x1 + -1", 2);
        let x2sq = p("x2^2", 2);
        let psi = x1.mul(&x1m1).unwrap().add(&x2sq).unwrap();
        assert_eq!(psi, p("x1^2 + -1 * x1 + x2^2", 2));
    }

    #[test]
    fn arity_mismatch_rejected() {
        let a = p("x1", 1);
        let b = p("x1", 2);
        assert!(matches!(
            a.add(&b),
            Err(PolyError::ArityMismatch { expected: 1, found: 2 })
        ));
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn differentiate_basics() {
        assert_eq!(
            p("x1^2 x2", 2).differentiate(0).unwrap(),
            p("2 * x1 x2", 2)
        );
        assert_eq!(p("x1^2", 2).differentiate(1).unwrap(), Polynomial::zero(2));
        assert_eq!(
            p("x1^2 + -1 * x1", 2).differentiate(0).unwrap(),
            p("2 * x1 + -1", 2)
        );
        assert!(p("x1", 1).differentiate(1).is_err());
    }

    #[test]
    fn evaluate_basics() {
        let q = p("x1^2 + x2^2", 2);
        assert_eq!(q.evaluate(&[1.0, 2.0]).unwrap(), 5.0);
        let psi = p("x1^2 + -1 * x1 + x2^2", 2);
        assert_eq!(psi.evaluate(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(psi.evaluate(&[0.5, 0.0]).unwrap(), -0.25);
        assert!(q.evaluate(&[1.0]).is_err());
    }

    #[test]
    fn substitute_expansion() {
        // x² with x := u+v
        let q = p("x1^2", 1);
        let mut asg = BTreeMap::new();
        asg.insert(0usize, p("x1 + x2", 2));
        assert_eq!(
            q.substitute(&asg).unwrap(),
            p("x1^2 + 2 * x1 x2 + x2^2", 2)
        );
    }

    #[test]
    fn substitute_identity() {
        let q = p("x1^2 x2 + -3 * x2 + 1/2", 2);
        let mut asg = BTreeMap::new();
        asg.insert(0usize, p("x1", 2));
        asg.insert(1usize, p("x2", 2));
        assert_eq!(q.substitute(&asg).unwrap(), q);
    }

    #[test]
    fn lift_into_wider_space() {
        // Ψ over (x1,x2) lifted into 8 variables, occupying the first block.
        let psi = p("x1^2 + -1 * x1 + x2^2", 2);
        let lifted = psi.lift_vars(8, &[0, 1]).unwrap();
        assert_eq!(lifted.arity(), 8);
        assert_eq!(
            lifted.evaluate(&[0.5, 0.1, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]).unwrap(),
            psi.evaluate(&[0.5, 0.1]).unwrap()
        );
        // Same polynomial shifted onto the delayed block.
        let delayed = psi.lift_vars(8, &[2, 3]).unwrap();
        assert_eq!(
            delayed.evaluate(&[9.0, 9.0, 0.5, 0.1, 9.0, 9.0, 9.0, 9.0]).unwrap(),
            psi.evaluate(&[0.5, 0.1]).unwrap()
        );
    }

    #[test]
    fn display_parse_round_trip() {
        let q = p("x1^2 + -1/3 * x1 x2^2 + 7/2", 2);
        let text = q.to_string();
        assert_eq!(text, "-1/3 * x1^1 x2^2 + 1/1 * x1^2 + 7/2");
        assert_eq!(Polynomial::parse(&text, 2).unwrap(), q);
        assert_eq!(Polynomial::zero(3).to_string(), "0");
        assert_eq!(Polynomial::parse("0", 3).unwrap(), Polynomial::zero(3));
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(Polynomial::parse("x3", 2).is_err());
        assert!(Polynomial::parse("x0", 2).is_err());
        assert!(Polynomial::parse("1/0", 2).is_err());
        assert!(Polynomial::parse("2 3 * x1", 2).is_err());
        assert!(Polynomial::parse("x1 + + x2", 2).is_err());
        assert!(Polynomial::parse("x1 -", 2).is_err());
    }

    #[test]
    fn parse_subtraction_syntax() {
        assert_eq!(p("x1^2 - 2 x1 + 1", 1), p("x1^2 + -2 x1 + 1", 1));
        assert_eq!(p("-x1 - x2", 2), p("-1 x1 + -1 x2", 2));
        assert_eq!(p("1 - -2 x1", 1), p("1 + 2 x1", 1));
        assert_eq!(p("-1/2 * x1 x2 - 3/4", 2), p("-1/2 x1 x2 + -3/4", 2));
    }

    #[test]
    fn generator_scalar_ito() {
        // V0 = x², f = −x, g = c: LV0 = −2x² + c²
        let v0 = p("x1^2", 1);
        let f = vec![p("-1 * x1", 2)];
        let g = vec![Polynomial::constant(1, rat(3, 1))];
        let got = apply_generator(&v0, &f, &g).unwrap();
        assert_eq!(got, p("-2 * x1^2 + 9", 2));
    }

    #[test]
    fn generator_linear_v0_drops_hessian() {
        let v0 = p("x1", 1);
        let f = vec![p("x1 x2 + -1 * x2^2", 2)];
        let g = vec![p("5 * x1^3", 1)];
        let got = apply_generator(&v0, &f, &g).unwrap();
        assert_eq!(got, f[0]);
    }

    // Independent symbolic-oracle expansion of the generator on V0 = ‖x‖²
    // with the spin-1/2 reduced dynamics (gains k = (1, 4), unit diffusion
    // scale). Coefficients frozen from a computer-algebra run.
    #[test]
    fn generator_matches_symbolic_oracle() {
        let v0 = p("x1^2 + x2^2", 2);
        let f = vec![
            // −(k1·xd1 + k2·xd2)·x2
            p("-1 * x2 x3 + -4 * x2 x4", 4),
            // (k1·xd1 + k2·xd2)·(x1 − 1/2) − x2/2
            p("x1 x3 + 4 * x1 x4 + -1/2 * x3 + -2 * x4 + -1/2 * x2", 4),
        ];
        let g = vec![p("2 * x1^2 + -2 * x1", 2), p("2 * x1 x2 + -1 * x2", 2)];
        let got = apply_generator(&v0, &f, &g).unwrap();
        let expected = p(
            "4 * x1^4 + -8 * x1^3 + 4 * x1^2 x2^2 + -4 * x1 x2^2 + 4 * x1^2 \
             + -1 * x2 x3 + -4 * x2 x4",
            4,
        );
        assert_eq!(got, expected);
    }

    #[test]
    fn generator_dimension_checks() {
        let v0 = p("x1^2", 1);
        assert!(apply_generator(&v0, &[], &[]).is_err());
        let bad_f = vec![p("x1", 1)]; // drift must live in 2n variables
        let g = vec![p("x1", 1)];
        assert!(apply_generator(&v0, &bad_f, &g).is_err());
    }

    fn arb_poly(arity: usize, max_terms: usize) -> impl Strategy<Value = Polynomial> {
        proptest::collection::vec(
            (
                proptest::collection::vec(0u32..3, arity),
                -20i64..20,
                1i64..6,
            ),
            1..=max_terms,
        )
        .prop_map(move |terms| {
            Polynomial::from_terms(
                arity,
                terms
                    .into_iter()
                    .map(|(e, n, d)| (Monomial::new(e), rat(n, d))),
            )
            .unwrap()
        })
    }

    proptest! {
        // evaluate is a ring homomorphism (up to float roundoff).
        #[test]
        fn eval_respects_product(a in arb_poly(3, 6), b in arb_poly(3, 6),
                                 z in proptest::collection::vec(-1.5f64..1.5, 3)) {
            let prod = a.mul(&b).unwrap().evaluate(&z).unwrap();
            let sep = a.evaluate(&z).unwrap() * b.evaluate(&z).unwrap();
            let scale = 1.0 + prod.abs().max(sep.abs());
            prop_assert!((prod - sep).abs() <= 1e-10 * scale);
        }

        // Product rule holds exactly as polynomials.
        #[test]
        fn derivative_product_rule(a in arb_poly(3, 5), b in arb_poly(3, 5)) {
            for v in 0..3 {
                let lhs = a.mul(&b).unwrap().differentiate(v).unwrap();
                let rhs = a.differentiate(v).unwrap().mul(&b).unwrap()
                    .add(&a.mul(&b.differentiate(v).unwrap()).unwrap()).unwrap();
                prop_assert_eq!(lhs, rhs);
            }
        }

        // The generator is linear in its state function.
        #[test]
        fn generator_linear_in_v0(u in arb_poly(2, 5), v in arb_poly(2, 5)) {
            let f = vec![
                Polynomial::parse("x3 + -1 * x1", 4).unwrap(),
                Polynomial::parse("x4 x1 + -2 * x2", 4).unwrap(),
            ];
            let g = vec![
                Polynomial::parse("x1 x2", 2).unwrap(),
                Polynomial::parse("x2^2 + -1 * x1", 2).unwrap(),
            ];
            let a = rat(3, 1);
            let b = rat(-1, 2);
            let combo = u.scale(&a).add(&v.scale(&b)).unwrap();
            let lhs = apply_generator(&combo, &f, &g).unwrap();
            let rhs = apply_generator(&u, &f, &g).unwrap().scale(&a)
                .add(&apply_generator(&v, &f, &g).unwrap().scale(&b)).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        // Exact and float evaluation agree.
        #[test]
        fn compiled_view_matches(a in arb_poly(3, 8),
                                 z in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let compiled = PolyF64::from(&a);
            let direct = a.evaluate(&z).unwrap();
            let fast = compiled.evaluate(&z);
            prop_assert!((direct - fast).abs() <= 1e-12 * (1.0 + direct.abs()));
        }

        // Display/parse round-trips exactly.
        #[test]
        fn text_round_trip(a in arb_poly(4, 8)) {
            let text = a.to_string();
            prop_assert_eq!(Polynomial::parse(&text, 4).unwrap(), a);
        }
    }
}
