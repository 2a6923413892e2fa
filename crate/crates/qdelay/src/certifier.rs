//! Stability certification for polynomial stochastic delay systems.
//!
//! A [`DelaySystem`] couples a polynomial drift `f(x, x_d)` — the second
//! argument standing for the state one delay `τ` in the past — with a
//! polynomial diffusion `g(x)` on a bounded semialgebraic domain `C`, plus
//! a convergence measure `V_*` that should decay along trajectories.
//! [`certify`] searches for a Lyapunov–Krasovskii certificate: decision
//! polynomials `V0`, `V1`, a coupling matrix `S`, and positive-definite
//! weights `R`, `T` enter the drift functional of [`build_f`] and its
//! slack-extended form [`build_upsilon`]; negativity of the latter on
//! `C × C × ℝ^{2n}` is relaxed to a sum-of-squares identity, solved as a
//! semidefinite program, rounded to exact rational arithmetic, and
//! re-verified from scratch. A [`StabilityCertificate`] therefore carries
//! machine-checkable evidence, not solver output:
//! [`verify_stability_certificate`] rebuilds the whole identity from the
//! embedded system and checks it in rational arithmetic.
//!
//! The slack variables `y ∈ ℝ^{2n}` bound the cross terms a delayed
//! argument introduces; eliminating them at their worst case
//! ([`upsilon_bar`]) recovers a two-argument polynomial that must be
//! nonpositive wherever both the current and the delayed state lie in `C`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use nalgebra::DMatrix;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::poly::{apply_generator, rat, Monomial, PolyError, Polynomial, Rational};
use crate::sdp::{self, Residuals, SdpStatus, SolveOptions};
use crate::sos::{
    cell, certificate_item, encode_nonneg_on_set, gram_basis, rationalize, verify_certificate,
    DecisionId, NonnegEncoding, ParamPoly, RationalMatrix, RationalSolution, RationalizeOptions,
    SdpBuilder, SosCertificateItem, SosError, SosIdentity, VerifyReport,
};

#[derive(Debug, Error)]
pub enum CertifierError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("system rejected: {0}")]
    System(String),
    #[error("invalid decision template: {0}")]
    Template(String),
    #[error("history unusable: {0}")]
    History(String),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("certificate mismatch: {0}")]
    Mismatch(String),
    #[error("internal inconsistency: {0}")]
    Internal(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// How the claim "trajectories never leave the domain `C`" is supported.
///
/// The certification argument needs `C` forward-invariant under the
/// dynamics. That holds by construction for systems produced by the
/// built-in state-space reductions; for hand-written systems it is the
/// caller's responsibility, and construction records a warning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvarianceStatus {
    /// Produced by [`crate::quantum::reduce_spin_half`]: the reduced
    /// coordinates range over exactly `C` for every density matrix.
    VerifiedSpinReduction,
    /// Asserted by the caller, not verified here.
    Asserted,
}

/// Plain data for a delay system, before validation.
///
/// [`DelaySystem::new`] checks the invariants and upgrades a spec into a
/// usable system. Conventions:
///
/// * `f`: `n` drift components, each in the `2n` variables
///   `(x_1..x_n, xd_1..xd_n)` where the `xd` block is the state delayed
///   by `tau`;
/// * `g`: `n` diffusion components in the `n` variables `x`. The effective
///   diffusion is `√diffusion_scale_sq · g`, which keeps the polynomial
///   data rational when the physical noise intensity has an irrational
///   square root;
/// * `domain`: polynomials cutting out `C = {x : p_i(x) ≤ 0 for all i}`;
/// * `v_star`: the convergence measure — zero at the origin, positive on
///   the rest of `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySystemSpec {
    pub n: usize,
    pub f: Vec<Polynomial>,
    pub g: Vec<Polynomial>,
    pub diffusion_scale_sq: Rational,
    pub tau: Rational,
    pub domain: Vec<Polynomial>,
    pub v_star: Polynomial,
}

/// Knobs for [`DelaySystem::with_options`].
#[derive(Debug, Clone)]
pub struct SystemOptions {
    /// Squared-radius bound `B`: construction certifies `‖x‖² ≤ B` on `C`.
    pub bound: Rational,
    /// Multiplier degree used in that boundedness certificate.
    pub bound_multiplier_degree: u32,
    /// Accepted domain samples wanted for the `v_star` positivity check.
    pub positivity_samples: usize,
    /// Support for the domain-invariance claim.
    pub invariance: InvarianceStatus,
}

impl Default for SystemOptions {
    fn default() -> Self {
        SystemOptions {
            bound: rat(4, 1),
            bound_multiplier_degree: 2,
            positivity_samples: 200,
            invariance: InvarianceStatus::Asserted,
        }
    }
}

/// A validated polynomial stochastic delay system on a bounded domain.
#[derive(Debug, Clone)]
pub struct DelaySystem {
    spec: DelaySystemSpec,
    bound: Rational,
    invariance: InvarianceStatus,
    warnings: Vec<String>,
}

impl DelaySystem {
    /// Validate a spec under [`SystemOptions::default`].
    pub fn new(spec: DelaySystemSpec) -> Result<Self, CertifierError> {
        Self::with_options(spec, &SystemOptions::default())
    }

    /// Validate a spec: dimension checks, `τ ≥ 0`, domain boundedness
    /// (certified as `‖x‖² ≤ B` on `C` via an SOS identity), the origin in
    /// `C`, `v_star(0) = 0`, and sampled positivity of `v_star` on `C`.
    pub fn with_options(
        spec: DelaySystemSpec,
        options: &SystemOptions,
    ) -> Result<Self, CertifierError> {
        let n = spec.n;
        if n == 0 {
            return Err(CertifierError::Dimension(
                "state dimension must be at least 1".into(),
            ));
        }
        let expect_arity = |polys: &[Polynomial], arity: usize, what: &str| {
            if let Some(p) = polys.iter().find(|p| p.arity() != arity) {
                return Err(CertifierError::Dimension(format!(
                    "{what} must have arity {arity}, found {}",
                    p.arity()
                )));
            }
            Ok(())
        };
        if spec.f.len() != n || spec.g.len() != n {
            return Err(CertifierError::Dimension(format!(
                "need {n} drift and {n} diffusion components, found {} and {}",
                spec.f.len(),
                spec.g.len()
            )));
        }
        expect_arity(&spec.f, 2 * n, "drift components")?;
        expect_arity(&spec.g, n, "diffusion components")?;
        expect_arity(&spec.domain, n, "domain polynomials")?;
        if spec.v_star.arity() != n {
            return Err(CertifierError::Dimension(format!(
                "v_star must have arity {n}, found {}",
                spec.v_star.arity()
            )));
        }
        if spec.tau.is_negative() {
            return Err(CertifierError::System("the delay must be nonnegative".into()));
        }
        if spec.diffusion_scale_sq.is_negative() {
            return Err(CertifierError::System(
                "the squared diffusion scale must be nonnegative".into(),
            ));
        }
        if spec.v_star.is_zero() {
            return Err(CertifierError::System(
                "v_star must not be identically zero".into(),
            ));
        }
        let origin = vec![Rational::zero(); n];
        if !spec.v_star.evaluate_rational(&origin)?.is_zero() {
            return Err(CertifierError::System(
                "v_star must vanish at the origin".into(),
            ));
        }
        for p in &spec.domain {
            if p.evaluate_rational(&origin)?.is_positive() {
                return Err(CertifierError::System(
                    "the origin lies outside the domain".into(),
                ));
            }
        }
        if !options.bound.is_positive() {
            return Err(CertifierError::System("the bound B must be positive".into()));
        }
        certify_bounded(&spec, &options.bound, options.bound_multiplier_degree)?;
        let accepted = spot_check_v_star(&spec, &options.bound, options.positivity_samples)?;
        let mut warnings = Vec::new();
        if accepted == 0 {
            warnings.push(
                "rejection sampling found no domain points; the v_star positivity check is vacuous"
                    .to_string(),
            );
        }
        if options.invariance == InvarianceStatus::Asserted {
            warnings.push(
                "domain invariance under the dynamics is asserted, not verified; \
                 certificates are conditional on trajectories remaining in the domain"
                    .to_string(),
            );
        }
        Ok(DelaySystem {
            spec,
            bound: options.bound.clone(),
            invariance: options.invariance,
            warnings,
        })
    }

    /// The same system with a different delay. Bypasses re-validation —
    /// none of the construction checks involve `τ` beyond its sign.
    pub fn with_tau(&self, tau: Rational) -> Result<DelaySystem, CertifierError> {
        if tau.is_negative() {
            return Err(CertifierError::System("the delay must be nonnegative".into()));
        }
        let mut out = self.clone();
        out.spec.tau = tau;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn f(&self) -> &[Polynomial] {
        &self.spec.f
    }

    pub fn g(&self) -> &[Polynomial] {
        &self.spec.g
    }

    pub fn diffusion_scale_sq(&self) -> &Rational {
        &self.spec.diffusion_scale_sq
    }

    pub fn tau(&self) -> &Rational {
        &self.spec.tau
    }

    pub fn domain(&self) -> &[Polynomial] {
        &self.spec.domain
    }

    pub fn v_star(&self) -> &Polynomial {
        &self.spec.v_star
    }

    /// The certified squared-radius bound of the domain.
    pub fn bound(&self) -> &Rational {
        &self.bound
    }

    pub fn invariance(&self) -> InvarianceStatus {
        self.invariance
    }

    /// Construction-time caveats worth surfacing to a user.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn spec(&self) -> &DelaySystemSpec {
        &self.spec
    }
}

/// Certify `B − ‖x‖² ≥ 0` on the domain, exactly.
fn certify_bounded(
    spec: &DelaySystemSpec,
    bound: &Rational,
    multiplier_degree: u32,
) -> Result<(), CertifierError> {
    let n = spec.n;
    let mut norm2 = Polynomial::zero(n);
    for i in 0..n {
        let v = Polynomial::variable(n, i)?;
        norm2 = norm2.add(&v.mul(&v)?)?;
    }
    let target = Polynomial::constant(n, bound.clone()).sub(&norm2)?;
    let mut builder = SdpBuilder::new();
    let enc = encode_nonneg_on_set(
        &ParamPoly::from_poly(target.clone()),
        &spec.domain,
        multiplier_degree,
        &mut builder,
    )?;
    let prob = builder.build(false)?;
    let sol = sdp::solve(&prob, &SolveOptions::default());
    let fail = |detail: String| {
        CertifierError::System(format!(
            "could not certify the domain bounded within ‖x‖² ≤ {}: {detail} — \
             raise the bound or the multiplier degree",
            rational_text(bound)
        ))
    };
    if !matches!(sol.status, SdpStatus::Optimal | SdpStatus::Feasible) {
        return Err(fail(format!("solver reported {:?}", sol.status)));
    }
    let rsol = rationalize(&builder, &sol, enc.master.gram_block, &RationalizeOptions::default())
        .map_err(|e| fail(format!("rounding failed: {e}")))?;
    let (_, _, report) = verified_items(&builder, &enc, &rsol, &spec.domain, &target)?;
    if !report.pass {
        return Err(fail(format!(
            "exact verification failed: {}",
            report.failures.join("; ")
        )));
    }
    Ok(())
}

/// Rejection-sample the certified bounding box and check `v_star > 0` on
/// accepted domain points (away from the origin), plus the sampled side of
/// the boundedness claim. Returns the number of accepted points.
fn spot_check_v_star(
    spec: &DelaySystemSpec,
    bound: &Rational,
    want: usize,
) -> Result<usize, CertifierError> {
    let n = spec.n;
    let bound_f = rational_to_f64(bound);
    let half_side = bound_f.sqrt();
    // Fixed internal seed: construction is deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    let cap = want * 1000 + 1000;
    while accepted < want && attempts < cap {
        attempts += 1;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-half_side..=half_side)).collect();
        let mut inside = true;
        for p in &spec.domain {
            if p.evaluate(&x)? > 0.0 {
                inside = false;
                break;
            }
        }
        if !inside {
            continue;
        }
        accepted += 1;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        if r2 > bound_f + 1e-6 {
            return Err(CertifierError::System(format!(
                "sampled domain point at squared radius {r2:.6} violates the certified bound {}",
                rational_text(bound)
            )));
        }
        if spec.v_star.evaluate(&x)? <= 0.0 && r2 > 1e-12 {
            return Err(CertifierError::System(format!(
                "v_star is not positive at the sampled domain point {x:?}"
            )));
        }
    }
    Ok(accepted)
}

/// Shape of the decision-variable search space for [`certify`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTemplate {
    /// Even degree of the candidate `V0`, at least 2.
    pub v0_degree: u32,
    /// Even degree of the candidate `V1`, at least 2.
    pub v1_degree: u32,
    /// Even degree of the domain multipliers in the master identity.
    pub multiplier_degree: u32,
    /// Positive-definiteness margin: `R = ε·I + R̃`, `T = ε·I + T̃` with
    /// the residuals `R̃`, `T̃` constrained PSD.
    pub epsilon: Rational,
}

impl Default for DecisionTemplate {
    fn default() -> Self {
        DecisionTemplate {
            v0_degree: 2,
            v1_degree: 2,
            multiplier_degree: 2,
            epsilon: rat(1, 1_000_000),
        }
    }
}

impl DecisionTemplate {
    fn validate(&self) -> Result<(), CertifierError> {
        for (name, d, min) in [
            ("v0_degree", self.v0_degree, 2),
            ("v1_degree", self.v1_degree, 2),
            ("multiplier_degree", self.multiplier_degree, 0),
        ] {
            if d % 2 != 0 || d < min {
                return Err(CertifierError::Template(format!(
                    "{name} must be an even integer ≥ {min}, got {d}"
                )));
            }
        }
        if !self.epsilon.is_positive() {
            return Err(CertifierError::Template("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Symbolic decision handles shared by [`build_f`], [`build_upsilon`], and
/// the SDP encoding. Produced by [`declare_decisions`].
#[derive(Debug, Clone)]
pub struct Decisions {
    /// Candidate `V0`: free coefficients on the monomials of degree
    /// `1..=v0_degree` (no constant term — constants cancel in the
    /// criterion, so this anchors `V0(0) = 0`).
    pub v0: ParamPoly,
    /// Candidate `V1`, same shape.
    pub v1: ParamPoly,
    /// Free scalars for the `2n×n` coupling matrix, row-major.
    pub s: Vec<Vec<DecisionId>>,
    /// PSD residual block of `R = ε·I + R̃`.
    pub r_block: usize,
    /// PSD residual block of `T = ε·I + T̃`.
    pub t_block: usize,
    pub epsilon: Rational,
}

/// Human-readable tag for a monomial, used in decision-variable names.
fn mono_label(m: &Monomial) -> String {
    if m.degree() == 0 {
        return "1".to_string();
    }
    let mut out = String::new();
    for (i, &e) in m.exponents().iter().enumerate() {
        if e == 0 {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        if e == 1 {
            write!(out, "x{}", i + 1).expect("string write");
        } else {
            write!(out, "x{}^{}", i + 1, e).expect("string write");
        }
    }
    out
}

/// Declare every decision scalar and block on a fresh builder.
pub fn declare_decisions(
    n: usize,
    template: &DecisionTemplate,
    builder: &mut SdpBuilder,
) -> Result<Decisions, CertifierError> {
    template.validate()?;
    let mut poly_decisions = |degree: u32, stem: &str| -> Result<ParamPoly, CertifierError> {
        let mut p = ParamPoly::zero(n);
        for m in gram_basis(n, 2 * degree)? {
            if m.degree() == 0 {
                continue;
            }
            let id = builder.add_free(&format!("{stem}[{}]", mono_label(&m)));
            p.add_decision(id, &Polynomial::from_terms(n, [(m, Rational::one())])?)?;
        }
        Ok(p)
    };
    let v0 = poly_decisions(template.v0_degree, "v0")?;
    let v1 = poly_decisions(template.v1_degree, "v1")?;
    let s = (0..2 * n)
        .map(|i| {
            (0..n)
                .map(|j| builder.add_free(&format!("s{}{}", i + 1, j + 1)))
                .collect()
        })
        .collect();
    let r_block = builder.add_matrix_block("Rmat", n);
    let t_block = builder.add_matrix_block("Tmat", n);
    Ok(Decisions {
        v0,
        v1,
        s,
        r_block,
        t_block,
        epsilon: template.epsilon.clone(),
    })
}

/// Re-index a parametric polynomial into a wider variable space.
fn lift_param(
    p: &ParamPoly,
    target_arity: usize,
    var_map: &[usize],
) -> Result<ParamPoly, CertifierError> {
    let mut out = ParamPoly::from_poly(p.base().lift_vars(target_arity, var_map)?);
    for (d, c) in p.parts() {
        out.add_decision(*d, &c.lift_vars(target_arity, var_map)?)?;
    }
    Ok(out)
}

/// Itô generator applied to a parametric `v0`: drift part plus
/// `scale_sq`-weighted diffusion part, distributed over the coefficients.
fn param_generator(
    v0: &ParamPoly,
    f: &[Polynomial],
    g: &[Polynomial],
    scale_sq: &Rational,
) -> Result<ParamPoly, CertifierError> {
    let n = v0.arity();
    let zero_g: Vec<Polynomial> = vec![Polynomial::zero(n); n];
    let zero_f: Vec<Polynomial> = vec![Polynomial::zero(2 * n); n];
    let one_term = |p: &Polynomial| -> Result<Polynomial, CertifierError> {
        let drift = apply_generator(p, f, &zero_g)?;
        let diffusion = apply_generator(p, &zero_f, g)?;
        Ok(drift.add(&diffusion.scale(scale_sq))?)
    };
    let mut out = ParamPoly::from_poly(if v0.base().is_zero() {
        Polynomial::zero(2 * n)
    } else {
        one_term(v0.base())?
    });
    for (d, c) in v0.parts() {
        out.add_decision(*d, &one_term(c)?)?;
    }
    Ok(out)
}

/// `ε·‖v‖² + vᵀ·M̃·v` with `M̃` the PSD block `block`: the parametric form
/// of `‖v‖²_M` for `M = ε·I + M̃`.
fn weighted_norm_param(
    v: &[Polynomial],
    block: usize,
    eps: &Rational,
) -> Result<ParamPoly, CertifierError> {
    let arity = v.first().map_or(0, Polynomial::arity);
    let mut base = Polynomial::zero(arity);
    for vi in v {
        base = base.add(&vi.mul(vi)?.scale(eps))?;
    }
    let mut out = ParamPoly::from_poly(base);
    for i in 0..v.len() {
        for j in i..v.len() {
            let prod = v[i].mul(&v[j])?;
            let c = if i == j { prod } else { prod.scale(&rat(2, 1)) };
            out.add_decision(cell(block, i, j), &c)?;
        }
    }
    Ok(out)
}

/// `vᵀ·M·v` for a concrete symmetric matrix.
fn weighted_norm(v: &[Polynomial], m: &RationalMatrix) -> Result<Polynomial, CertifierError> {
    if v.len() != m.dim() {
        return Err(CertifierError::Dimension(format!(
            "vector of length {} against a {}×{} weight",
            v.len(),
            m.dim(),
            m.dim()
        )));
    }
    let arity = v.first().map_or(0, Polynomial::arity);
    let mut out = Polynomial::zero(arity);
    for i in 0..v.len() {
        for j in i..v.len() {
            let w = m.get(i, j);
            if w.is_zero() {
                continue;
            }
            let c = if i == j { w.clone() } else { rat(2, 1) * w };
            out = out.add(&v[i].mul(&v[j])?.scale(&c))?;
        }
    }
    Ok(out)
}

/// Assemble the drift functional with symbolic decisions:
///
/// ```text
/// F = 𝓛V0 + V1(x) − V1(x_d) + V_*(x) + τ‖g‖²_T
///       + 2[x;x_d]ᵀS(x−x_d) + τ‖f‖²_R
/// ```
///
/// in the `2n` variables `(x, x_d)`, where `𝓛` is the Itô generator of
/// the dynamics. Every decision enters linearly: the quadratic norms are
/// linear in the entries of `R = ε·I + R̃` and `T = ε·I + T̃`.
pub fn build_f(system: &DelaySystem, dec: &Decisions) -> Result<ParamPoly, CertifierError> {
    let n = system.n();
    let wide = 2 * n;
    if dec.v0.arity() != n || dec.v1.arity() != n || dec.s.len() != wide {
        return Err(CertifierError::Dimension(
            "decision shapes do not match the system dimension".into(),
        ));
    }
    let spec = system.spec();
    let x_map: Vec<usize> = (0..n).collect();
    let d_map: Vec<usize> = (n..wide).collect();
    let mut out = param_generator(&dec.v0, &spec.f, &spec.g, &spec.diffusion_scale_sq)?;
    out = out.add(&lift_param(&dec.v1, wide, &x_map)?)?;
    out = out.sub(&lift_param(&dec.v1, wide, &d_map)?)?;
    out = out.add(&ParamPoly::from_poly(spec.v_star.lift_vars(wide, &x_map)?))?;
    // τ‖g‖²_T — the diffusion carries the scale factor, so its squared
    // norm carries scale_sq.
    let g_lifted: Vec<Polynomial> = spec
        .g
        .iter()
        .map(|p| p.lift_vars(wide, &x_map))
        .collect::<Result<_, _>>()?;
    let tau_scale = &spec.tau * &spec.diffusion_scale_sq;
    out = out.add(&weighted_norm_param(&g_lifted, dec.t_block, &dec.epsilon)?.scale(&tau_scale))?;
    // 2[x;x_d]ᵀS(x−x_d)
    for i in 0..wide {
        let e_i = Polynomial::variable(wide, i)?;
        for (j, s_ij) in dec.s[i].iter().enumerate() {
            let diff = Polynomial::variable(wide, j)?.sub(&Polynomial::variable(wide, n + j)?)?;
            out.add_decision(*s_ij, &e_i.mul(&diff)?.scale(&rat(2, 1)))?;
        }
    }
    // τ‖f‖²_R
    out = out.add(&weighted_norm_param(&spec.f, dec.r_block, &dec.epsilon)?.scale(&spec.tau))?;
    Ok(out)
}

/// Extend `F` with the slack quadratic form in `y ∈ ℝ^{2n}`:
///
/// ```text
/// Υ = F + 2[x;x_d]ᵀS·y_T + 2τ[x;x_d]ᵀS·y_R − ‖y_T‖²_T − τ‖y_R‖²_R
/// ```
///
/// in the `4n` variables `(x, x_d, y_T, y_R)`: the first `n` slack
/// components carry the `T` weight, the last `n` the `τR` weight.
/// Negativity of `Υ` on `C × C × ℝ^{2n}` is the certified condition.
pub fn build_upsilon(
    system: &DelaySystem,
    dec: &Decisions,
    f_param: &ParamPoly,
) -> Result<ParamPoly, CertifierError> {
    let n = system.n();
    let wide = 2 * n;
    let full = 4 * n;
    if f_param.arity() != wide {
        return Err(CertifierError::Dimension(format!(
            "F must have arity {wide}, found {}",
            f_param.arity()
        )));
    }
    let id_map: Vec<usize> = (0..wide).collect();
    let mut out = lift_param(f_param, full, &id_map)?;
    let tau = &system.spec().tau;
    for i in 0..wide {
        let e_i = Polynomial::variable(full, i)?;
        for (j, s_ij) in dec.s[i].iter().enumerate() {
            let y_t = Polynomial::variable(full, wide + j)?;
            let y_r = Polynomial::variable(full, wide + n + j)?;
            let coeff = e_i
                .mul(&y_t)?
                .scale(&rat(2, 1))
                .add(&e_i.mul(&y_r)?.scale(&(rat(2, 1) * tau)))?;
            out.add_decision(*s_ij, &coeff)?;
        }
    }
    let y_t_vars: Vec<Polynomial> = (0..n)
        .map(|j| Polynomial::variable(full, wide + j))
        .collect::<Result<_, _>>()?;
    let y_r_vars: Vec<Polynomial> = (0..n)
        .map(|j| Polynomial::variable(full, wide + n + j))
        .collect::<Result<_, _>>()?;
    out = out.sub(&weighted_norm_param(&y_t_vars, dec.t_block, &dec.epsilon)?)?;
    out = out.sub(&weighted_norm_param(&y_r_vars, dec.r_block, &dec.epsilon)?.scale(tau))?;
    Ok(out)
}

/// Concrete decision values: the numeric counterpart of [`Decisions`].
///
/// `r` and `t` are the *full* weight matrices (margin included), so this
/// struct is also what a parsed certificate yields.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionValues {
    pub v0: Polynomial,
    pub v1: Polynomial,
    /// Row-major `2n×n`.
    pub s: Vec<Vec<Rational>>,
    pub r: RationalMatrix,
    pub t: RationalMatrix,
}

fn check_values(system: &DelaySystem, values: &DecisionValues) -> Result<(), CertifierError> {
    let n = system.n();
    let shape_ok = values.v0.arity() == n
        && values.v1.arity() == n
        && values.s.len() == 2 * n
        && values.s.iter().all(|row| row.len() == n)
        && values.r.dim() == n
        && values.t.dim() == n;
    if !shape_ok {
        return Err(CertifierError::Dimension(
            "decision values do not match the system dimension".into(),
        ));
    }
    Ok(())
}

/// Numeric `F` for fixed decisions. Deliberately independent of the
/// parametric path of [`build_f`] so the two can cross-check each other.
pub fn assemble_f(
    system: &DelaySystem,
    values: &DecisionValues,
) -> Result<Polynomial, CertifierError> {
    check_values(system, values)?;
    let n = system.n();
    let wide = 2 * n;
    let spec = system.spec();
    let x_map: Vec<usize> = (0..n).collect();
    let d_map: Vec<usize> = (n..wide).collect();
    let zero_g: Vec<Polynomial> = vec![Polynomial::zero(n); n];
    let zero_f: Vec<Polynomial> = vec![Polynomial::zero(wide); n];
    let drift = apply_generator(&values.v0, &spec.f, &zero_g)?;
    let diffusion = apply_generator(&values.v0, &zero_f, &spec.g)?;
    let mut out = drift.add(&diffusion.scale(&spec.diffusion_scale_sq))?;
    out = out.add(&values.v1.lift_vars(wide, &x_map)?)?;
    out = out.sub(&values.v1.lift_vars(wide, &d_map)?)?;
    out = out.add(&spec.v_star.lift_vars(wide, &x_map)?)?;
    let g_lifted: Vec<Polynomial> = spec
        .g
        .iter()
        .map(|p| p.lift_vars(wide, &x_map))
        .collect::<Result<_, _>>()?;
    let tau_scale = &spec.tau * &spec.diffusion_scale_sq;
    out = out.add(&weighted_norm(&g_lifted, &values.t)?.scale(&tau_scale))?;
    for i in 0..wide {
        let e_i = Polynomial::variable(wide, i)?;
        for j in 0..n {
            if values.s[i][j].is_zero() {
                continue;
            }
            let diff = Polynomial::variable(wide, j)?.sub(&Polynomial::variable(wide, n + j)?)?;
            out = out.add(&e_i.mul(&diff)?.scale(&(rat(2, 1) * &values.s[i][j])))?;
        }
    }
    out = out.add(&weighted_norm(&spec.f, &values.r)?.scale(&spec.tau))?;
    Ok(out)
}

/// Numeric `Υ` for fixed decisions; see [`build_upsilon`] for the formula.
pub fn assemble_upsilon(
    system: &DelaySystem,
    values: &DecisionValues,
) -> Result<Polynomial, CertifierError> {
    check_values(system, values)?;
    let n = system.n();
    let wide = 2 * n;
    let full = 4 * n;
    let tau = &system.spec().tau;
    let id_map: Vec<usize> = (0..wide).collect();
    let mut out = assemble_f(system, values)?.lift_vars(full, &id_map)?;
    for i in 0..wide {
        let e_i = Polynomial::variable(full, i)?;
        for j in 0..n {
            if values.s[i][j].is_zero() {
                continue;
            }
            let y_t = Polynomial::variable(full, wide + j)?;
            let y_r = Polynomial::variable(full, wide + n + j)?;
            let two_s = rat(2, 1) * &values.s[i][j];
            out = out.add(&e_i.mul(&y_t)?.scale(&two_s))?;
            out = out.add(&e_i.mul(&y_r)?.scale(&(two_s * tau)))?;
        }
    }
    let y_t_vars: Vec<Polynomial> = (0..n)
        .map(|j| Polynomial::variable(full, wide + j))
        .collect::<Result<_, _>>()?;
    let y_r_vars: Vec<Polynomial> = (0..n)
        .map(|j| Polynomial::variable(full, wide + n + j))
        .collect::<Result<_, _>>()?;
    out = out.sub(&weighted_norm(&y_t_vars, &values.t)?)?;
    out = out.sub(&weighted_norm(&y_r_vars, &values.r)?.scale(tau))?;
    Ok(out)
}

/// `Υ` with the slack variables eliminated at their maximizing values
/// `y_T = T⁻¹Sᵀ[x;x_d]`, `y_R = R⁻¹Sᵀ[x;x_d]`, as a polynomial in
/// `(x, x_d)`. A valid certificate makes this nonpositive on `C × C`.
pub fn upsilon_bar(cert: &StabilityCertificate) -> Result<Polynomial, CertifierError> {
    let system = &cert.system;
    let n = system.n();
    let wide = 2 * n;
    let values = cert.decision_values();
    let ups = assemble_upsilon(system, &values)?;
    let t_inv = values
        .t
        .inverse()
        .ok_or_else(|| CertifierError::Internal("T is singular".into()))?;
    let r_inv = values
        .r
        .inverse()
        .ok_or_else(|| CertifierError::Internal("R is singular".into()))?;
    // (Sᵀ[x;x_d])_l as polynomials in (x, x_d).
    let mut st_e = Vec::with_capacity(n);
    for l in 0..n {
        let mut p = Polynomial::zero(wide);
        for i in 0..wide {
            if values.s[i][l].is_zero() {
                continue;
            }
            p = p.add(&Polynomial::variable(wide, i)?.scale(&values.s[i][l]))?;
        }
        st_e.push(p);
    }
    let mut assign: BTreeMap<usize, Polynomial> = BTreeMap::new();
    for v in 0..wide {
        assign.insert(v, Polynomial::variable(wide, v)?);
    }
    for j in 0..n {
        let mut y_t = Polynomial::zero(wide);
        let mut y_r = Polynomial::zero(wide);
        for l in 0..n {
            y_t = y_t.add(&st_e[l].scale(t_inv.get(j, l)))?;
            y_r = y_r.add(&st_e[l].scale(r_inv.get(j, l)))?;
        }
        assign.insert(wide + j, y_t);
        assign.insert(wide + n + j, y_r);
    }
    Ok(ups.substitute(&assign)?)
}

/// Diagnostics carried by [`CertifyOutcome::Unknown`].
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub status: SdpStatus,
    pub iterations: usize,
    pub residuals: Residuals,
    pub message: String,
}

/// Result of a certification attempt. `Unknown` is honest: the relaxation
/// produced no verifiable certificate, which never proves instability.
#[derive(Debug, Clone)]
pub enum CertifyOutcome {
    Certified(Box<StabilityCertificate>),
    Unknown(Diagnostics),
}

/// Multiplier block name: `h`/`h_d` for a single-polynomial domain,
/// indexed otherwise.
fn mult_name(stem: &str, k: usize, m: usize) -> String {
    if m == 1 {
        stem.to_string()
    } else {
        format!("{stem}{k}")
    }
}

/// Certificate items and the identity they must satisfy, plus the
/// from-scratch verification report.
fn verified_items(
    builder: &SdpBuilder,
    enc: &NonnegEncoding,
    rsol: &RationalSolution,
    domain_lifted: &[Polynomial],
    target: &Polynomial,
) -> Result<(Vec<SosCertificateItem>, SosIdentity, VerifyReport), CertifierError> {
    let arity = target.arity();
    let mut items = vec![certificate_item(builder, enc.master.gram_block, rsol)?];
    let mut weights = vec![Polynomial::constant(arity, Rational::one())];
    for (c, p) in enc.multipliers.iter().zip(domain_lifted) {
        items.push(certificate_item(builder, c.gram_block, rsol)?);
        weights.push(p.neg());
    }
    let identity = SosIdentity {
        weights,
        target: target.clone(),
    };
    let report = verify_certificate(&items, &identity);
    Ok((items, identity, report))
}

/// Search for a stability certificate.
///
/// Encodes "`−Υ` is nonnegative on `C × C × ℝ^{2n}`" as a master SOS
/// identity with one multiplier per domain polynomial per argument, solves
/// the semidefinite relaxation, rounds the solution to rationals, and only
/// returns `Certified` once the rounded identity re-verifies exactly and
/// `R`, `T` are confirmed positive definite. Anything short of that comes
/// back as `Unknown` with diagnostics. Deterministic for fixed inputs.
pub fn certify(
    system: &DelaySystem,
    template: &DecisionTemplate,
) -> Result<CertifyOutcome, CertifierError> {
    template.validate()?;
    let n = system.n();
    let full = 4 * n;
    let mut builder = SdpBuilder::new();
    let dec = declare_decisions(n, template, &mut builder)?;
    let f_param = build_f(system, &dec)?;
    let upsilon = build_upsilon(system, &dec, &f_param)?;
    let target = upsilon.neg();
    let x_map: Vec<usize> = (0..n).collect();
    let d_map: Vec<usize> = (n..2 * n).collect();
    let mut lifted: Vec<Polynomial> = Vec::with_capacity(2 * system.domain().len());
    for p in system.domain() {
        lifted.push(p.lift_vars(full, &x_map)?);
    }
    for p in system.domain() {
        lifted.push(p.lift_vars(full, &d_map)?);
    }
    let enc = encode_nonneg_on_set(&target, &lifted, template.multiplier_degree, &mut builder)?;
    let m = system.domain().len();
    for (k, c) in enc.multipliers.iter().enumerate() {
        let name = if k < m {
            mult_name("h", k, m)
        } else {
            mult_name("h_d", k - m, m)
        };
        builder.rename_block(c.gram_block, &name);
    }
    let prob = builder.build(false)?;
    let sol = sdp::solve(&prob, &SolveOptions::default());
    let diag = |message: String| Diagnostics {
        status: sol.status,
        iterations: sol.iterations,
        residuals: sol.residuals,
        message,
    };
    if !matches!(sol.status, SdpStatus::Optimal | SdpStatus::Feasible) {
        let detail = if sol.message.is_empty() {
            format!("solver reported {:?}", sol.status)
        } else {
            sol.message.clone()
        };
        return Ok(CertifyOutcome::Unknown(diag(format!(
            "no feasible relaxation found: {detail}"
        ))));
    }
    let rsol = match rationalize(
        &builder,
        &sol,
        enc.master.gram_block,
        &RationalizeOptions::default(),
    ) {
        Ok(r) => r,
        Err(e) => {
            return Ok(CertifyOutcome::Unknown(diag(format!(
                "rationalization failed: {e}"
            ))))
        }
    };
    let v0 = dec.v0.resolve(&rsol)?;
    let v1 = dec.v1.resolve(&rsol)?;
    let s: Vec<Vec<Rational>> = dec
        .s
        .iter()
        .map(|row| row.iter().map(|id| rsol.value(*id)).collect())
        .collect::<Result<_, _>>()?;
    let r = shifted_identity(&rsol.grams[dec.r_block], &dec.epsilon);
    let t = shifted_identity(&rsol.grams[dec.t_block], &dec.epsilon);
    if !r.is_positive_definite_exact() || !t.is_positive_definite_exact() {
        return Ok(CertifyOutcome::Unknown(diag(
            "rounded R or T lost positive definiteness".into(),
        )));
    }
    let resolved_target = target.resolve(&rsol)?;
    let (items, _, report) = verified_items(&builder, &enc, &rsol, &lifted, &resolved_target)?;
    if !report.pass {
        return Ok(CertifyOutcome::Unknown(diag(format!(
            "exact verification failed: {}",
            report.failures.join("; ")
        ))));
    }
    // Cross-check the parametric assembly against the independent concrete
    // one; a mismatch is a bug, not a certification failure.
    let values = DecisionValues {
        v0: v0.clone(),
        v1: v1.clone(),
        s: s.clone(),
        r: r.clone(),
        t: t.clone(),
    };
    if assemble_upsilon(system, &values)?.neg() != resolved_target {
        return Err(CertifierError::Internal(
            "parametric and concrete assemblies of the certified identity disagree".into(),
        ));
    }
    let mut items = items;
    let master = items.remove(0);
    let mult_x = items.drain(..m).collect();
    let mult_xd = items;
    Ok(CertifyOutcome::Certified(Box::new(StabilityCertificate {
        fingerprint: fingerprint(system),
        system: system.clone(),
        v0,
        v1,
        s,
        r,
        t,
        master,
        mult_x,
        mult_xd,
    })))
}

/// `ε·I + M` for a PSD residual block.
fn shifted_identity(m: &RationalMatrix, eps: &Rational) -> RationalMatrix {
    let mut out = m.clone();
    for i in 0..m.dim() {
        out.add_sym(i, i, eps);
    }
    out
}

/// An exactly verified stability certificate for a [`DelaySystem`].
///
/// All data is rational. `s` is the row-major `2n×n` coupling matrix; `r`
/// and `t` are the full positive-definite weights; `master` and the
/// multiplier items witness the identity
///
/// ```text
/// −Υ = master − Σ_i mult_x[i]·p_i(x) − Σ_i mult_xd[i]·p_i(x_d)
/// ```
///
/// with every multiplier and the master a sum of squares. The certificate
/// embeds its system and a fingerprint so a reader can re-derive `Υ` and
/// re-check everything: see [`verify_stability_certificate`].
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub system: DelaySystem,
    /// Hex SHA-256 of [`system_block_text`].
    pub fingerprint: String,
    pub v0: Polynomial,
    pub v1: Polynomial,
    pub s: Vec<Vec<Rational>>,
    pub r: RationalMatrix,
    pub t: RationalMatrix,
    pub master: SosCertificateItem,
    pub mult_x: Vec<SosCertificateItem>,
    pub mult_xd: Vec<SosCertificateItem>,
}

impl StabilityCertificate {
    pub fn tau(&self) -> &Rational {
        self.system.tau()
    }

    pub fn decision_values(&self) -> DecisionValues {
        DecisionValues {
            v0: self.v0.clone(),
            v1: self.v1.clone(),
            s: self.s.clone(),
            r: self.r.clone(),
            t: self.t.clone(),
        }
    }

    /// The items and identity of the master SOS decomposition, rebuilt
    /// from the embedded system and decision values.
    fn identity(&self) -> Result<(Vec<SosCertificateItem>, SosIdentity), CertifierError> {
        let n = self.system.n();
        let full = 4 * n;
        let x_map: Vec<usize> = (0..n).collect();
        let d_map: Vec<usize> = (n..2 * n).collect();
        let values = self.decision_values();
        let target = assemble_upsilon(&self.system, &values)?.neg();
        let mut items = vec![self.master.clone()];
        let mut weights = vec![Polynomial::constant(full, Rational::one())];
        for (item, p) in self.mult_x.iter().zip(self.system.domain()) {
            items.push(item.clone());
            weights.push(p.lift_vars(full, &x_map)?.neg());
        }
        for (item, p) in self.mult_xd.iter().zip(self.system.domain()) {
            items.push(item.clone());
            weights.push(p.lift_vars(full, &d_map)?.neg());
        }
        Ok((items, SosIdentity { weights, target }))
    }
}

/// Re-derive and re-check everything a certificate claims: the identity
/// target is rebuilt from the embedded system and decision values, every
/// Gram identity and PSD floor is re-checked in exact arithmetic, `R` and
/// `T` are confirmed positive definite, and the fingerprint must match the
/// embedded system.
pub fn verify_stability_certificate(
    cert: &StabilityCertificate,
) -> Result<VerifyReport, CertifierError> {
    check_values(&cert.system, &cert.decision_values())?;
    let m = cert.system.domain().len();
    if cert.mult_x.len() != m || cert.mult_xd.len() != m {
        return Err(CertifierError::Mismatch(format!(
            "expected {m} multipliers per argument, found {} and {}",
            cert.mult_x.len(),
            cert.mult_xd.len()
        )));
    }
    let mut failures = Vec::new();
    if cert.fingerprint != fingerprint(&cert.system) {
        failures.push("fingerprint does not match the embedded system".to_string());
    }
    if !cert.r.is_positive_definite_exact() {
        failures.push("R is not positive definite".to_string());
    }
    if !cert.t.is_positive_definite_exact() {
        failures.push("T is not positive definite".to_string());
    }
    let (items, identity) = cert.identity()?;
    let mut report = verify_certificate(&items, &identity);
    if !failures.is_empty() {
        failures.extend(report.failures);
        report.failures = failures;
        report.pass = false;
    }
    Ok(report)
}

/// Canonical text of the system itself — the fingerprinted content and the
/// head of system and certificate files.
pub fn system_block_text(system: &DelaySystem) -> String {
    let spec = system.spec();
    let mut out = String::new();
    writeln!(out, "qdelay-system v1").expect("string write");
    writeln!(out, "n {}", spec.n).expect("string write");
    writeln!(out, "tau {}", rational_text(&spec.tau)).expect("string write");
    writeln!(out, "scale_sq {}", rational_text(&spec.diffusion_scale_sq)).expect("string write");
    writeln!(out, "bound {}", rational_text(system.bound())).expect("string write");
    for p in &spec.f {
        writeln!(out, "f {p}").expect("string write");
    }
    for p in &spec.g {
        writeln!(out, "g {p}").expect("string write");
    }
    for p in &spec.domain {
        writeln!(out, "domain {p}").expect("string write");
    }
    writeln!(out, "v_star {}", spec.v_star).expect("string write");
    out
}

/// Hex SHA-256 of the canonical system block.
pub fn fingerprint(system: &DelaySystem) -> String {
    let mut h = Sha256::new();
    h.update(system_block_text(system).as_bytes());
    hex::encode(h.finalize())
}

/// `p/q` text for a rational (denominator always written).
pub fn rational_text(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Nearest `f64` of a rational.
pub fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Parse an exact rational from `p/q`, integer, or decimal text; decimals
/// convert exactly (`-1.25 → −5/4`) and scientific notation is accepted.
pub fn parse_decimal_rational(text: &str) -> Result<Rational, String> {
    use num_bigint::BigInt;
    let s = text.trim();
    if s.is_empty() {
        return Err("empty number".to_string());
    }
    if let Some((num, den)) = s.split_once('/') {
        let n: BigInt = num
            .trim()
            .parse()
            .map_err(|_| format!("invalid numerator '{num}'"))?;
        let d: BigInt = den
            .trim()
            .parse()
            .map_err(|_| format!("invalid denominator '{den}'"))?;
        if d.is_zero() {
            return Err("zero denominator".to_string());
        }
        return Ok(Rational::new(n, d));
    }
    let (mantissa, exp) = match s.split_once(['e', 'E']) {
        Some((m, e)) => {
            let exp: i32 = e.parse().map_err(|_| format!("invalid exponent '{e}'"))?;
            (m, exp)
        }
        None => (s, 0),
    };
    let (sign, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (-1, rest),
        None => (1, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(format!("no digits in '{s}'"));
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return Err(format!("invalid number '{s}'"));
    }
    let joined = format!("{int_part}{frac_part}");
    let mantissa_int: BigInt = if joined.is_empty() {
        BigInt::zero()
    } else {
        joined.parse().map_err(|_| format!("invalid number '{s}'"))?
    };
    let mut value = Rational::from_integer(mantissa_int * BigInt::from(sign));
    let shift = exp - frac_part.len() as i32;
    let ten = Rational::from_integer(BigInt::from(10));
    for _ in 0..shift.abs() {
        if shift > 0 {
            value *= &ten;
        } else {
            value /= &ten;
        }
    }
    Ok(value)
}

/// Write a system file: the canonical block plus the template degrees.
pub fn write_system_file(
    w: &mut impl io::Write,
    system: &DelaySystem,
    template: &DecisionTemplate,
) -> io::Result<()> {
    w.write_all(system_block_text(system).as_bytes())?;
    writeln!(w, "v0_degree {}", template.v0_degree)?;
    writeln!(w, "v1_degree {}", template.v1_degree)?;
    writeln!(w, "multiplier_degree {}", template.multiplier_degree)?;
    writeln!(w, "epsilon {}", rational_text(&template.epsilon))?;
    Ok(())
}

/// Parse the *system block only* (used both by system files and by the
/// block embedded in certificates). Lines after the block's keys that this
/// function does not recognize are handed back for the caller to consume.
fn parse_system_block(
    lines: &[(usize, &str)],
) -> Result<(DelaySystemSpec, Rational, usize), CertifierError> {
    let fail = |line: usize, reason: String| CertifierError::Format { line, reason };
    let mut it = lines.iter();
    let (ln, first) = it
        .next()
        .ok_or_else(|| fail(0, "empty input".to_string()))?;
    if first.trim() != "qdelay-system v1" {
        return Err(fail(*ln, "expected header 'qdelay-system v1'".to_string()));
    }
    let mut n: Option<usize> = None;
    let mut tau: Option<Rational> = None;
    let mut scale_sq: Option<Rational> = None;
    let mut bound: Option<Rational> = None;
    let mut f: Vec<Polynomial> = Vec::new();
    let mut g: Vec<Polynomial> = Vec::new();
    let mut domain: Vec<Polynomial> = Vec::new();
    let mut v_star: Option<Polynomial> = None;
    let mut consumed = 1usize;
    for (ln, raw) in it {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            consumed += 1;
            continue;
        }
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let need_n = |n: &Option<usize>| {
            n.ok_or_else(|| fail(*ln, "the dimension 'n' must come before polynomials".to_string()))
        };
        let rational = |what: &str| {
            parse_decimal_rational(rest).map_err(|e| fail(*ln, format!("{what}: {e}")))
        };
        let poly = |arity: usize, what: &str| {
            Polynomial::parse(rest, arity).map_err(|e| fail(*ln, format!("{what}: {e}")))
        };
        match key {
            "n" => {
                let v: usize = rest
                    .parse()
                    .map_err(|_| fail(*ln, format!("invalid dimension '{rest}'")))?;
                n = Some(v);
            }
            "tau" => tau = Some(rational("tau")?),
            "scale_sq" => scale_sq = Some(rational("scale_sq")?),
            "bound" => bound = Some(rational("bound")?),
            "f" => f.push(poly(2 * need_n(&n)?, "drift component")?),
            "g" => g.push(poly(need_n(&n)?, "diffusion component")?),
            "domain" => domain.push(poly(need_n(&n)?, "domain polynomial")?),
            "v_star" => v_star = Some(poly(need_n(&n)?, "v_star")?),
            _ => break, // not a system key: the caller owns the rest
        }
        consumed += 1;
    }
    let line_for_missing = lines.last().map_or(0, |(ln, _)| *ln);
    let missing = |what: &str| fail(line_for_missing, format!("missing '{what}'"));
    let n = n.ok_or_else(|| missing("n"))?;
    let spec = DelaySystemSpec {
        n,
        f,
        g,
        diffusion_scale_sq: scale_sq.unwrap_or_else(Rational::one),
        tau: tau.ok_or_else(|| missing("tau"))?,
        domain,
        v_star: v_star.ok_or_else(|| missing("v_star"))?,
    };
    if spec.f.len() != n || spec.g.len() != n {
        return Err(missing(&format!(
            "{n} 'f' lines and {n} 'g' lines (found {} and {})",
            spec.f.len(),
            spec.g.len()
        )));
    }
    Ok((spec, bound.unwrap_or_else(|| rat(4, 1)), consumed))
}

/// Parse a system file (block plus optional template keys) and validate
/// the system. Errors carry 1-based line numbers.
pub fn read_system_file(text: &str) -> Result<(DelaySystem, DecisionTemplate), CertifierError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .collect();
    let (spec, bound, consumed) = parse_system_block(&lines)?;
    let mut template = DecisionTemplate::default();
    for (ln, raw) in &lines[consumed..] {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |reason: String| CertifierError::Format { line: *ln, reason };
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let degree = || -> Result<u32, CertifierError> {
            rest.parse()
                .map_err(|_| fail(format!("invalid degree '{rest}'")))
        };
        match key {
            "v0_degree" => template.v0_degree = degree()?,
            "v1_degree" => template.v1_degree = degree()?,
            "multiplier_degree" => template.multiplier_degree = degree()?,
            "epsilon" => {
                template.epsilon =
                    parse_decimal_rational(rest).map_err(|e| fail(format!("epsilon: {e}")))?
            }
            _ => return Err(fail(format!("unknown key '{key}'"))),
        }
    }
    let system = DelaySystem::with_options(
        spec,
        &SystemOptions {
            bound,
            ..SystemOptions::default()
        },
    )?;
    Ok((system, template))
}

/// Write a certificate file: fingerprint, embedded system block, decision
/// values, and the SOS items in the certificate text format.
pub fn write_stability_certificate(
    w: &mut impl io::Write,
    cert: &StabilityCertificate,
) -> Result<(), CertifierError> {
    writeln!(w, "qdelay-certificate v1")?;
    writeln!(w, "fingerprint {}", cert.fingerprint)?;
    writeln!(w, "system-begin")?;
    w.write_all(system_block_text(&cert.system).as_bytes())?;
    writeln!(w, "system-end")?;
    writeln!(w, "v0 {}", cert.v0)?;
    writeln!(w, "v1 {}", cert.v1)?;
    let n = cert.system.n();
    writeln!(w, "s {} {}", 2 * n, n)?;
    for row in &cert.s {
        let cells: Vec<String> = row.iter().map(rational_text).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    for (name, m) in [("r", &cert.r), ("t", &cert.t)] {
        writeln!(w, "{name} {}", m.dim())?;
        for i in 0..m.dim() {
            let cells: Vec<String> = (0..m.dim()).map(|j| rational_text(m.get(i, j))).collect();
            writeln!(w, "{}", cells.join(" "))?;
        }
    }
    writeln!(w, "sos-begin")?;
    let (items, identity) = cert.identity()?;
    crate::sos::write_certificate(w, &items, &identity)?;
    Ok(())
}

/// Advance the cursor to the next meaningful line (skipping blanks and
/// comments) or fail naming what was expected.
fn next_line<'a>(
    all: &[(usize, &'a str)],
    pos: &mut usize,
    expect: &str,
) -> Result<(usize, &'a str), CertifierError> {
    while *pos < all.len() {
        let (ln, raw) = all[*pos];
        *pos += 1;
        let line = raw.trim();
        if !line.is_empty() && !line.starts_with('#') {
            return Ok((ln, line));
        }
    }
    Err(CertifierError::Format {
        line: all.last().map_or(0, |(ln, _)| *ln),
        reason: format!("unexpected end of file, expected {expect}"),
    })
}

/// Parse a certificate file. The certificate's fingerprint must match the
/// embedded system (the system itself is re-validated on load); full
/// semantic verification is [`verify_stability_certificate`].
pub fn read_stability_certificate(text: &str) -> Result<StabilityCertificate, CertifierError> {
    let all: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let fail = |line: usize, reason: String| CertifierError::Format { line, reason };
    let mut pos = 0usize;
    let (ln, header) = next_line(&all, &mut pos, "header")?;
    if header != "qdelay-certificate v1" {
        return Err(fail(ln, "expected header 'qdelay-certificate v1'".to_string()));
    }
    let (ln, fp_line) = next_line(&all, &mut pos, "fingerprint")?;
    let declared_fp = fp_line
        .strip_prefix("fingerprint ")
        .ok_or_else(|| fail(ln, "expected 'fingerprint <hex>'".to_string()))?
        .trim()
        .to_string();
    let (ln, begin) = next_line(&all, &mut pos, "system-begin")?;
    if begin != "system-begin" {
        return Err(fail(ln, "expected 'system-begin'".to_string()));
    }
    let sys_start = pos;
    let mut sys_end = None;
    while pos < all.len() {
        if all[pos].1.trim() == "system-end" {
            sys_end = Some(pos);
            pos += 1;
            break;
        }
        pos += 1;
    }
    let sys_end = sys_end.ok_or_else(|| {
        fail(
            all.last().map_or(0, |(ln, _)| *ln),
            "missing 'system-end'".to_string(),
        )
    })?;
    let (spec, bound, _) = parse_system_block(&all[sys_start..sys_end])?;
    let system = DelaySystem::with_options(
        spec,
        &SystemOptions {
            bound,
            ..SystemOptions::default()
        },
    )?;
    if fingerprint(&system) != declared_fp {
        return Err(CertifierError::Mismatch(
            "fingerprint does not match the embedded system".into(),
        ));
    }
    let n = system.n();
    let keyed_poly = |line: &str, ln: usize, key: &str| -> Result<Polynomial, CertifierError> {
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| fail(ln, format!("expected '{key} <polynomial>'")))?;
        Polynomial::parse(rest.trim(), n).map_err(|e| fail(ln, format!("{key}: {e}")))
    };
    let (ln, line) = next_line(&all, &mut pos, "v0")?;
    let v0 = keyed_poly(line, ln, "v0")?;
    let (ln, line) = next_line(&all, &mut pos, "v1")?;
    let v1 = keyed_poly(line, ln, "v1")?;
    let (ln, line) = next_line(&all, &mut pos, "s")?;
    let dims: Vec<&str> = line
        .strip_prefix("s ")
        .ok_or_else(|| fail(ln, "expected 's <rows> <cols>'".to_string()))?
        .split_whitespace()
        .collect();
    if dims.len() != 2 || dims[0] != (2 * n).to_string() || dims[1] != n.to_string() {
        return Err(fail(ln, format!("expected 's {} {}'", 2 * n, n)));
    }
    fn rationals_row(
        all: &[(usize, &str)],
        pos: &mut usize,
        count: usize,
    ) -> Result<Vec<Rational>, CertifierError> {
        let (ln, line) = next_line(all, pos, "matrix row")?;
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells.len() != count {
            return Err(CertifierError::Format {
                line: ln,
                reason: format!("expected {count} entries, found {}", cells.len()),
            });
        }
        cells
            .iter()
            .map(|c| {
                parse_decimal_rational(c).map_err(|e| CertifierError::Format { line: ln, reason: e })
            })
            .collect()
    }
    let mut s = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        s.push(rationals_row(&all, &mut pos, n)?);
    }
    fn square(
        all: &[(usize, &str)],
        pos: &mut usize,
        key: &str,
        n: usize,
    ) -> Result<RationalMatrix, CertifierError> {
        let (ln, line) = next_line(all, pos, key)?;
        if line != format!("{key} {n}") {
            return Err(CertifierError::Format {
                line: ln,
                reason: format!("expected '{key} {n}'"),
            });
        }
        let mut m = RationalMatrix::zeros(n);
        for i in 0..n {
            let row = rationals_row(all, pos, n)?;
            for (j, v) in row.into_iter().enumerate() {
                if j >= i {
                    m.set_sym(i, j, v);
                }
            }
        }
        Ok(m)
    }
    let r = square(&all, &mut pos, "r", n)?;
    let t = square(&all, &mut pos, "t", n)?;
    let (ln, line) = next_line(&all, &mut pos, "sos-begin")?;
    if line != "sos-begin" {
        return Err(fail(ln, "expected 'sos-begin'".to_string()));
    }
    let sos_text: String = all[pos..]
        .iter()
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n");
    // The SOS parser numbers lines within its own block; report file lines.
    let (items, _identity) = crate::sos::read_certificate(&sos_text).map_err(|e| match e {
        crate::sos::SosError::Parse { line, reason } => fail(pos + line, reason),
        other => CertifierError::from(other),
    })?;
    let m = system.domain().len();
    if items.len() != 1 + 2 * m {
        return Err(CertifierError::Mismatch(format!(
            "expected {} SOS items, found {}",
            1 + 2 * m,
            items.len()
        )));
    }
    let mut items = items;
    let master = items.remove(0);
    let mult_x = items.drain(..m).collect();
    let mult_xd = items;
    Ok(StabilityCertificate {
        system,
        fingerprint: declared_fp,
        v0,
        v1,
        s,
        r,
        t,
        master,
        mult_x,
        mult_xd,
    })
}

/// One probed delay in a sweep.
#[derive(Debug, Clone)]
pub struct DelayProbe {
    pub tau: Rational,
    pub certified: bool,
    pub message: String,
}

/// Result of [`max_certified_delay`].
#[derive(Debug, Clone)]
pub struct DelaySweep {
    /// Supremum of the contiguous certified prefix of the grid; `None`
    /// when even the smallest probe failed.
    pub max_tau: Option<Rational>,
    /// Every probe, in increasing delay order.
    pub probes: Vec<DelayProbe>,
    /// Certified delays above the first failure — evidence of
    /// non-monotone certifiability, reported rather than hidden.
    pub noncontiguous: Vec<Rational>,
}

/// Probe the delays `0 = τ_0 < … < τ_k = tau_max` on a uniform grid with
/// spacing at most `tol` and report the largest certified prefix. Probes
/// run in parallel and certifiability is never assumed monotone in the
/// delay.
pub fn max_certified_delay(
    system: &DelaySystem,
    template: &DecisionTemplate,
    tau_max: &Rational,
    tol: &Rational,
) -> Result<DelaySweep, CertifierError> {
    if tau_max.is_negative() {
        return Err(CertifierError::System("tau_max must be nonnegative".into()));
    }
    if !tol.is_positive() {
        return Err(CertifierError::System("tol must be positive".into()));
    }
    template.validate()?;
    let steps = if tau_max.is_zero() {
        0
    } else {
        (tau_max / tol)
            .ceil()
            .to_integer()
            .to_usize()
            .unwrap_or(usize::MAX)
    };
    if steps > 10_000 {
        return Err(CertifierError::System(format!(
            "tolerance implies {steps} probes; refusing more than 10000"
        )));
    }
    let taus: Vec<Rational> = (0..=steps)
        .map(|i| {
            if steps == 0 {
                Rational::zero()
            } else {
                tau_max * rat(i as i64, 1) / rat(steps as i64, 1)
            }
        })
        .collect();
    let probes: Vec<DelayProbe> = taus
        .into_par_iter()
        .map(|tau| {
            let outcome = system
                .with_tau(tau.clone())
                .and_then(|sys| certify(&sys, template));
            let (certified, message) = match outcome {
                Ok(CertifyOutcome::Certified(_)) => (true, "certified".to_string()),
                Ok(CertifyOutcome::Unknown(d)) => (false, d.message),
                Err(e) => (false, format!("error: {e}")),
            };
            DelayProbe {
                tau,
                certified,
                message,
            }
        })
        .collect();
    let first_fail = probes.iter().position(|p| !p.certified);
    let max_tau = match first_fail {
        Some(0) => None,
        Some(k) => Some(probes[k - 1].tau.clone()),
        None => probes.last().map(|p| p.tau.clone()),
    };
    let noncontiguous = match first_fail {
        Some(k) => probes[k..]
            .iter()
            .filter(|p| p.certified)
            .map(|p| p.tau.clone())
            .collect(),
        None => Vec::new(),
    };
    Ok(DelaySweep {
        max_tau,
        probes,
        noncontiguous,
    })
}

/// Write one `tau,certified,message` row per probe.
pub fn write_delay_sweep_csv(w: &mut impl io::Write, sweep: &DelaySweep) -> io::Result<()> {
    writeln!(w, "tau,certified,message")?;
    for p in &sweep.probes {
        let message = p.message.replace([',', '\n'], ";");
        writeln!(w, "{},{},{}", rational_to_f64(&p.tau), p.certified, message)?;
    }
    Ok(())
}

/// Evaluate the certificate's Lyapunov–Krasovskii functional
///
/// ```text
/// V = V0(x(0)) + ∫_{−τ}^{0} V1(x(θ)) dθ
///       + ∫_{−τ}^{0} (θ+τ)·(‖f(x(θ), x(θ−τ))‖²_R + ‖g(x(θ))‖²_T) dθ
/// ```
///
/// on a sampled history. `history` is chronological with spacing `dt`, its
/// last entry the current state `x(0)`; it must reach back `2τ` because
/// the integrand reads the drift's delayed argument. Quadrature is
/// trapezoidal on the grid (exact for constant histories, where the kernel
/// integrand is linear in `θ`).
pub fn evaluate_functional(
    cert: &StabilityCertificate,
    dt: f64,
    history: &[Vec<f64>],
) -> Result<f64, CertifierError> {
    let system = &cert.system;
    let n = system.n();
    if !(dt > 0.0) {
        return Err(CertifierError::History("dt must be positive".into()));
    }
    if let Some(state) = history.iter().find(|s| s.len() != n) {
        return Err(CertifierError::History(format!(
            "state of length {} in an {n}-dimensional system",
            state.len()
        )));
    }
    let tau_f = rational_to_f64(system.tau());
    let steps_f = tau_f / dt;
    let m = steps_f.round() as usize;
    if (steps_f - m as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(CertifierError::History(format!(
            "the delay {tau_f} is not an integer multiple of dt = {dt}"
        )));
    }
    if history.len() < 2 * m + 1 {
        return Err(CertifierError::History(format!(
            "need at least {} samples to cover twice the delay, got {}",
            2 * m + 1,
            history.len()
        )));
    }
    let cur = history.len() - 1;
    let mut v = cert.v0.evaluate(&history[cur])?;
    if m == 0 {
        return Ok(v);
    }
    let r_f = cert.r.to_f64();
    let t_f = cert.t.to_f64();
    let scale = rational_to_f64(system.diffusion_scale_sq());
    let quad = |mat: &DMatrix<f64>, vec: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..vec.len() {
            for j in 0..vec.len() {
                acc += mat[(i, j)] * vec[i] * vec[j];
            }
        }
        acc
    };
    for j in 0..=m {
        let w = dt * if j == 0 || j == m { 0.5 } else { 1.0 };
        let x = &history[cur - m + j];
        v += w * cert.v1.evaluate(x)?;
        let kernel = j as f64 * dt; // θ_j + τ
        if kernel == 0.0 {
            continue;
        }
        let xd = &history[cur - 2 * m + j];
        let mut point = x.clone();
        point.extend_from_slice(xd);
        let f_val: Vec<f64> = system
            .f()
            .iter()
            .map(|p| p.evaluate(&point))
            .collect::<Result<_, _>>()?;
        let g_val: Vec<f64> = system
            .g()
            .iter()
            .map(|p| p.evaluate(x))
            .collect::<Result<_, _>>()?;
        v += w * kernel * (quad(&r_f, &f_val) + scale * quad(&t_f, &g_val));
    }
    Ok(v)
}

/// Rejection-sample points of `C` from the certified bounding box
/// `[−√B, √B]ⁿ`. Deterministic in `seed`; may return fewer than `count`
/// points if acceptance stalls (attempt budget `2000·count + 2000`).
pub fn sample_domain(
    system: &DelaySystem,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, CertifierError> {
    let n = system.n();
    let half_side = rational_to_f64(system.bound()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let cap = 2000 * count + 2000;
    while out.len() < count && attempts < cap {
        attempts += 1;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-half_side..=half_side)).collect();
        let mut inside = true;
        for p in system.domain() {
            if p.evaluate(&x)? > 0.0 {
                inside = false;
                break;
            }
        }
        if inside {
            out.push(x);
        }
    }
    Ok(out)
}
