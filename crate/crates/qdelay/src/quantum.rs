//! Quantum side of the crate: density matrices, collective spin operators,
//! the controlled stochastic master equation, and the exact spin-1/2
//! reduction onto the planar delay system consumed by [`crate::certifier`].
//!
//! The filter state of a continuously monitored spin ensemble is a density
//! matrix `ρ` driven by the innovations Wiener process: a magnetic field
//! along the y-axis supplies the control Hamiltonian `u·F_y`, and homodyne
//! detection of the z-axis observable `F_z` contributes a double-commutator
//! dephasing drift plus a measurement back-action diffusion. For a single
//! spin-1/2 the state has three real coordinates, the closed loop leaves one
//! of them decoupled, and the remaining two obey a polynomial stochastic
//! delay system on a disc — exactly the object [`crate::certifier`]
//! certifies. [`reduce_spin_half`] performs that translation with exact
//! rational coefficients, and [`embed_state`] / [`project_state`] move
//! states between the two descriptions.

use nalgebra::DMatrix;
use num_complex::Complex;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use crate::certifier::{
    CertifierError, DelaySystem, DelaySystemSpec, InvarianceStatus, SystemOptions,
};
use crate::poly::{Monomial, PolyError, Polynomial, Rational};

/// Dense complex matrix used for operators and states.
pub type CMatrix = DMatrix<Complex<f64>>;

/// Errors from state validation, model construction, and the reduction.
#[derive(Debug, Error)]
pub enum QuantumError {
    /// A dimension is out of range or two shapes disagree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A matrix fails the density-matrix invariants.
    #[error("not a density matrix: {0}")]
    State(String),
    /// Model parameters are out of range or inconsistent.
    #[error("invalid model: {0}")]
    Model(String),
    /// A point lies outside the physical state space.
    #[error("embedding error: {0}")]
    Embed(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Certifier(#[from] CertifierError),
}

/// Mirror the strict upper triangle onto the lower one and force a real
/// diagonal. The output satisfies `h[(j,i)] == h[(i,j)].conj()` bit-for-bit,
/// so Hermiticity of everything built through here is exact, not approximate.
fn hermitize(m: &CMatrix) -> CMatrix {
    let n = m.nrows();
    let mut h = CMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = Complex::new(m[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            h[(i, j)] = v;
            h[(j, i)] = v.conj();
        }
    }
    h
}

/// Largest entrywise deviation from Hermitian symmetry.
fn hermitian_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Real part of `tr(a·b)`; for Hermitian factors the trace is real up to
/// rounding, so the imaginary part carries no information.
fn trace_product_re(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += (a[(i, j)] * b[(j, i)]).re;
        }
    }
    acc
}

fn rat(p: i64, q: i64) -> Rational {
    Rational::new(p.into(), q.into())
}

/// An `N×N` quantum state: Hermitian, unit trace, positive semidefinite.
///
/// Hermiticity is exact by construction (the constructor mirrors the upper
/// triangle); the trace and spectrum checks allow `1e-9` of floating-point
/// slack so that states coming out of numerical integration remain
/// representable.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    entries: CMatrix,
}

impl DensityMatrix {
    /// Validate and store a state. The input must be square, Hermitian to
    /// `1e-9`, have trace `1 ± 1e-9`, and smallest eigenvalue `≥ -1e-9`.
    pub fn new(entries: CMatrix) -> Result<Self, QuantumError> {
        if entries.nrows() != entries.ncols() {
            return Err(QuantumError::Dimension(format!(
                "state must be square, got {}×{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.nrows() == 0 {
            return Err(QuantumError::Dimension("state dimension is zero".into()));
        }
        let dev = hermitian_deviation(&entries);
        if dev > 1e-9 {
            return Err(QuantumError::State(format!(
                "Hermitian deviation {dev:.3e} exceeds 1e-9"
            )));
        }
        let h = hermitize(&entries);
        let trace = h.trace().re;
        if (trace - 1.0).abs() > 1e-9 {
            return Err(QuantumError::State(format!(
                "trace {trace:.12} is not 1 within 1e-9"
            )));
        }
        let min_eig = h
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-9 {
            return Err(QuantumError::State(format!(
                "minimum eigenvalue {min_eig:.3e} is below -1e-9"
            )));
        }
        Ok(DensityMatrix { entries: h })
    }

    /// Wrap entries whose invariants the caller has already established —
    /// exactly Hermitian, unit trace, spectrum above `-1e-9`. Used by the
    /// integrator after its own physicality repair, where re-validating
    /// would redo the eigenvalue work just performed.
    pub(crate) fn new_unchecked(entries: CMatrix) -> Self {
        debug_assert_eq!(hermitian_deviation(&entries), 0.0);
        debug_assert!((entries.trace().re - 1.0).abs() <= 1e-9);
        DensityMatrix { entries }
    }

    /// The maximally mixed state `I/n`.
    pub fn maximally_mixed(n: usize) -> Result<Self, QuantumError> {
        if n == 0 {
            return Err(QuantumError::Dimension("state dimension is zero".into()));
        }
        let scale = Complex::new(1.0 / n as f64, 0.0);
        DensityMatrix::new(CMatrix::identity(n, n) * scale)
    }

    /// The rank-one projector onto the `k`-th standard basis vector — an
    /// eigenstate of any operator that is diagonal in that basis.
    pub fn basis_projector(n: usize, k: usize) -> Result<Self, QuantumError> {
        if k >= n {
            return Err(QuantumError::Dimension(format!(
                "basis index {k} out of range for dimension {n}"
            )));
        }
        let mut m = CMatrix::zeros(n, n);
        m[(k, k)] = Complex::one();
        DensityMatrix::new(m)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    /// `tr(ρσ)`, real for Hermitian states.
    pub fn overlap(&self, other: &DensityMatrix) -> Result<f64, QuantumError> {
        if self.dim() != other.dim() {
            return Err(QuantumError::Dimension(format!(
                "state dimensions {} and {} disagree",
                self.dim(),
                other.dim()
            )));
        }
        Ok(trace_product_re(&self.entries, &other.entries))
    }

    /// `1 − tr(ρσ)`: zero exactly at `σ`, one at an orthogonal pure state.
    pub fn distance_to(&self, target: &DensityMatrix) -> Result<f64, QuantumError> {
        Ok(1.0 - self.overlap(target)?)
    }

    /// Expectation `tr(Aρ)` of a Hermitian observable.
    pub fn expectation(&self, op: &CMatrix) -> Result<f64, QuantumError> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(QuantumError::Dimension(format!(
                "observable is {}×{}, state is {}×{}",
                op.nrows(),
                op.ncols(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(trace_product_re(op, &self.entries))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.entries
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Collective angular-momentum operators for `N−1` spin-1/2 atoms.
///
/// `Fy` generates rotations about the y-axis (the control Hamiltonian is
/// `u·Fy`) and `Fz` is the continuously monitored observable.
#[derive(Debug, Clone)]
pub struct SpinOperators {
    n: usize,
    fy: CMatrix,
    fz: CMatrix,
}

impl SpinOperators {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn fy(&self) -> &CMatrix {
        &self.fy
    }

    pub fn fz(&self) -> &CMatrix {
        &self.fz
    }
}

/// Build the spin operators in the `Fz` eigenbasis.
///
/// With `c_m = √((N−m)m)` for `m = 1, …, N−1`, `Fy` is the tridiagonal
/// matrix `(i/2)·[0, c₁; −c₁, 0, c₂; …]` and
/// `Fz = ½·diag(N−1, N−3, …, −(N−1))`. Both are Hermitian and traceless;
/// the `Fz` spectrum is exactly the half-integer ladder.
pub fn make_spin_operators(n: usize) -> Result<SpinOperators, QuantumError> {
    if n < 2 {
        return Err(QuantumError::Dimension(format!(
            "spin operators need dimension at least 2, got {n}"
        )));
    }
    let mut fy = CMatrix::zeros(n, n);
    for m in 1..n {
        // c_m couples levels m−1 and m (1-based m in the ladder formula).
        let c = (((n - m) * m) as f64).sqrt();
        fy[(m - 1, m)] = Complex::new(0.0, 0.5 * c);
        fy[(m, m - 1)] = Complex::new(0.0, -0.5 * c);
    }
    let mut fz = CMatrix::zeros(n, n);
    for k in 0..n {
        fz[(k, k)] = Complex::new((n as f64 - 1.0 - 2.0 * k as f64) / 2.0, 0.0);
    }
    Ok(SpinOperators { n, fy, fz })
}

/// Which `Fz` eigenstate a spin-1/2 regulation problem targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpinTarget {
    /// `ρ_↑ = diag(1, 0)`: the `+½` eigenstate.
    Up,
    /// `ρ_↓ = diag(0, 1)`: the `−½` eigenstate.
    Down,
}

impl SpinTarget {
    /// The projector onto this target in dimension `n` (`Up` is the highest
    /// `Fz` level, `Down` the lowest).
    pub fn projector(self, n: usize) -> Result<DensityMatrix, QuantumError> {
        match self {
            SpinTarget::Up => DensityMatrix::basis_projector(n, 0),
            SpinTarget::Down => DensityMatrix::basis_projector(n, n - 1),
        }
    }
}

/// The controlled filter model: spin operators, measurement efficiency,
/// regulation target, and feedback gains.
///
/// `eta` and the gains are kept as exact rationals so that
/// [`reduce_spin_half`] can hand the certifier a delay system with exact
/// coefficients; the simulation routines convert to `f64` on use.
#[derive(Debug, Clone)]
pub struct SmeModel {
    ops: SpinOperators,
    eta: Rational,
    target: DensityMatrix,
    gains: (Rational, Rational),
}

impl SmeModel {
    /// Validate a model: `eta ∈ (0, 1]`, shapes consistent, and the target a
    /// rank-one eigenprojector of `Fz` (the control law measures the overlap
    /// with the target and the commutator response, which is meaningful
    /// exactly for such targets).
    pub fn new(
        ops: SpinOperators,
        eta: Rational,
        target: DensityMatrix,
        gains: (Rational, Rational),
    ) -> Result<Self, QuantumError> {
        if eta <= Rational::zero() || eta > Rational::one() {
            return Err(QuantumError::Model(format!(
                "measurement efficiency {eta} is outside (0, 1]"
            )));
        }
        if target.dim() != ops.n() {
            return Err(QuantumError::Dimension(format!(
                "target dimension {} does not match the operators' {}",
                target.dim(),
                ops.n()
            )));
        }
        let rho = target.entries();
        let idem = max_abs(&(rho * rho - rho));
        if idem > 1e-9 {
            return Err(QuantumError::Model(format!(
                "target is not a projector (‖ρ² − ρ‖ = {idem:.3e})"
            )));
        }
        let comm = max_abs(&commutator(ops.fz(), rho));
        if comm > 1e-9 {
            return Err(QuantumError::Model(format!(
                "target does not commute with Fz (‖[Fz, ρ]‖ = {comm:.3e})"
            )));
        }
        Ok(SmeModel {
            ops,
            eta,
            target,
            gains,
        })
    }

    /// Convenience constructor for the single-spin case with an `Up`/`Down`
    /// target.
    pub fn spin_half(
        target: SpinTarget,
        eta: Rational,
        gains: (Rational, Rational),
    ) -> Result<Self, QuantumError> {
        let ops = make_spin_operators(2)?;
        let rho_f = target.projector(2)?;
        SmeModel::new(ops, eta, rho_f, gains)
    }

    pub fn ops(&self) -> &SpinOperators {
        &self.ops
    }

    pub fn eta(&self) -> &Rational {
        &self.eta
    }

    pub fn eta_f64(&self) -> f64 {
        self.eta.to_f64().unwrap_or(f64::NAN)
    }

    pub fn sqrt_eta(&self) -> f64 {
        self.eta_f64().sqrt()
    }

    pub fn target(&self) -> &DensityMatrix {
        &self.target
    }

    pub fn gains(&self) -> (&Rational, &Rational) {
        (&self.gains.0, &self.gains.1)
    }

    fn check_state(&self, rho: &DensityMatrix) -> Result<(), QuantumError> {
        if rho.dim() != self.ops.n() {
            return Err(QuantumError::Dimension(format!(
                "state dimension {} does not match the model's {}",
                rho.dim(),
                self.ops.n()
            )));
        }
        Ok(())
    }
}

/// Feedback law `u(ρ) = k₁(1 − tr(ρρ_f)) + k₂·tr(i[F_y, ρ]ρ_f)`.
///
/// The second term locally stabilizes the target; the first pushes the state
/// away from the antipodal equilibrium so the law acts globally. Both traces
/// are real for Hermitian arguments (the imaginary residue is rounding noise
/// below `1e-12` and is discarded).
pub fn control_input(model: &SmeModel, rho: &DensityMatrix) -> Result<f64, QuantumError> {
    model.check_state(rho)?;
    let rho_f = model.target().entries();
    let mismatch = 1.0 - trace_product_re(rho.entries(), rho_f);
    let response = commutator(model.ops().fy(), rho.entries()) * Complex::new(0.0, 1.0);
    debug_assert!(hermitian_deviation(&response) <= 1e-12);
    let alignment = trace_product_re(&response, rho_f);
    let k1 = model.gains.0.to_f64().unwrap_or(f64::NAN);
    let k2 = model.gains.1.to_f64().unwrap_or(f64::NAN);
    Ok(k1 * mismatch + k2 * alignment)
}

/// Drift of the filter state: `i[u·F_y, ρ] − ½[F_z, [F_z, ρ]]`.
///
/// The first term is Hamiltonian control, the second the dephasing induced
/// by the continuous measurement. The result is traceless and exactly
/// Hermitian.
pub fn sme_drift(model: &SmeModel, rho: &DensityMatrix, u: f64) -> Result<CMatrix, QuantumError> {
    model.check_state(rho)?;
    let control = commutator(model.ops().fy(), rho.entries()) * Complex::new(0.0, u);
    let inner = commutator(model.ops().fz(), rho.entries());
    let dephasing = commutator(model.ops().fz(), &inner) * Complex::new(0.5, 0.0);
    Ok(hermitize(&(control - dephasing)))
}

/// Diffusion of the filter state: `√η·(F_zρ + ρF_z − 2tr(F_zρ)ρ)` — the
/// measurement back-action along the innovations process. Traceless and
/// exactly Hermitian.
pub fn sme_diffusion(model: &SmeModel, rho: &DensityMatrix) -> Result<CMatrix, QuantumError> {
    model.check_state(rho)?;
    let fz = model.ops().fz();
    let expect = trace_product_re(fz, rho.entries());
    let raw = fz * rho.entries() + rho.entries() * fz
        - rho.entries() * Complex::new(2.0 * expect, 0.0);
    Ok(hermitize(&raw) * Complex::new(model.sqrt_eta(), 0.0))
}

/// Reduce the spin-1/2 closed loop to its planar delay system.
///
/// In the regulation-error coordinates the state is
/// `[x⁽¹⁾, x⁽²⁾ + i·x⁽³⁾; x⁽²⁾ − i·x⁽³⁾, −x⁽¹⁾]`, read as `ρ_f − ρ` for an
/// `Up` target and `ρ − ρ_f` for `Down`. Under the delayed feedback
/// `u = u(ρ_{t−τ})` the pair `x = (x⁽¹⁾, x⁽²⁾)` decouples from `x⁽³⁾` and
/// obeys
///
/// ```text
/// dx = f(x, x_d) dt + √η·g̃(x) dw,
/// f = [ −(k·x_d)·x⁽²⁾
///       (k·x_d)·(x⁽¹⁾ − ½) − ½·x⁽²⁾ ],   k·x_d = k₁x_d⁽¹⁾ + k₂x_d⁽²⁾,
/// g̃ = ± [ 2x⁽¹⁾(x⁽¹⁾ − 1)
///          (2x⁽¹⁾ − 1)·x⁽²⁾ ],
/// ```
///
/// with the `+` sign for `Up` and `−` for `Down` (the drift is identical in
/// both conventions). Positivity of `ρ` confines `x` to the disc
/// `Ψ(x) = x⁽¹⁾(x⁽¹⁾ − 1) + (x⁽²⁾)² ≤ 0`, which the solutions never leave,
/// so the returned system carries
/// [`InvarianceStatus::VerifiedSpinReduction`]. The target sits at the
/// origin and `V_* = ‖x‖²` measures the regulation error.
pub fn reduce_spin_half(model: &SmeModel, tau: Rational) -> Result<DelaySystem, QuantumError> {
    if model.ops().n() != 2 {
        return Err(QuantumError::Dimension(format!(
            "the planar reduction applies to a single spin-1/2 (dimension 2), got {}",
            model.ops().n()
        )));
    }
    let target = identify_spin_target(model.target())?;
    let (k1, k2) = (&model.gains.0, &model.gains.1);
    let half = rat(1, 2);

    // Stacked variables (x₁, x₂, x_d₁, x_d₂); the drift is bilinear in the
    // delayed pair through the control u = k·x_d.
    let f1 = Polynomial::from_terms(
        4,
        vec![
            (Monomial::new(vec![0, 1, 1, 0]), -k1.clone()),
            (Monomial::new(vec![0, 1, 0, 1]), -k2.clone()),
        ],
    )?;
    let f2 = Polynomial::from_terms(
        4,
        vec![
            (Monomial::new(vec![1, 0, 1, 0]), k1.clone()),
            (Monomial::new(vec![1, 0, 0, 1]), k2.clone()),
            (Monomial::new(vec![0, 0, 1, 0]), -(k1 * &half)),
            (Monomial::new(vec![0, 0, 0, 1]), -(k2 * &half)),
            (Monomial::new(vec![0, 1, 0, 0]), -half.clone()),
        ],
    )?;
    let mut g1 = Polynomial::parse("2 x1^2 - 2 x1", 2)?;
    let mut g2 = Polynomial::parse("2 x1 x2 - x2", 2)?;
    if target == SpinTarget::Down {
        // Same diffusion law with the innovations sign flipped pathwise.
        g1 = g1.neg();
        g2 = g2.neg();
    }
    let psi = Polynomial::parse("x1^2 - x1 + x2^2", 2)?;
    let v_star = Polynomial::parse("x1^2 + x2^2", 2)?;

    let spec = DelaySystemSpec {
        n: 2,
        f: vec![f1, f2],
        g: vec![g1, g2],
        diffusion_scale_sq: model.eta.clone(),
        tau,
        domain: vec![psi],
        v_star,
    };
    let options = SystemOptions {
        invariance: InvarianceStatus::VerifiedSpinReduction,
        ..SystemOptions::default()
    };
    Ok(DelaySystem::with_options(spec, &options)?)
}

fn identify_spin_target(target: &DensityMatrix) -> Result<SpinTarget, QuantumError> {
    for choice in [SpinTarget::Up, SpinTarget::Down] {
        let projector = choice.projector(2)?;
        if max_abs(&(target.entries() - projector.entries())) <= 1e-12 {
            return Ok(choice);
        }
    }
    Err(QuantumError::Model(
        "the planar reduction needs the target to be the up or down eigenstate".into(),
    ))
}

/// Rebuild the density matrix from planar error coordinates plus the
/// decoupled third coordinate.
///
/// The point must satisfy `x⁽¹⁾(x⁽¹⁾ − 1) + (x⁽²⁾)² + (x⁽³⁾)² ≤ 0` — the
/// image of the state space — up to `1e-9` of slack for boundary round-off.
pub fn embed_state(x: [f64; 2], x3: f64, target: SpinTarget) -> Result<DensityMatrix, QuantumError> {
    let ball = x[0] * (x[0] - 1.0) + x[1] * x[1] + x3 * x3;
    if ball > 1e-9 {
        return Err(QuantumError::Embed(format!(
            "point ({}, {}, {x3}) lies outside the physical ball (margin {ball:.3e})",
            x[0], x[1]
        )));
    }
    let mut m = CMatrix::zeros(2, 2);
    match target {
        SpinTarget::Up => {
            m[(0, 0)] = Complex::new(1.0 - x[0], 0.0);
            m[(0, 1)] = Complex::new(-x[1], -x3);
            m[(1, 0)] = Complex::new(-x[1], x3);
            m[(1, 1)] = Complex::new(x[0], 0.0);
        }
        SpinTarget::Down => {
            m[(0, 0)] = Complex::new(x[0], 0.0);
            m[(0, 1)] = Complex::new(x[1], x3);
            m[(1, 0)] = Complex::new(x[1], -x3);
            m[(1, 1)] = Complex::new(1.0 - x[0], 0.0);
        }
    }
    DensityMatrix::new(m)
}

/// Invert [`embed_state`]: read the error coordinates off a spin-1/2 state.
/// Round-trips through `embed_state` are exact.
pub fn project_state(
    rho: &DensityMatrix,
    target: SpinTarget,
) -> Result<([f64; 2], f64), QuantumError> {
    if rho.dim() != 2 {
        return Err(QuantumError::Dimension(format!(
            "the planar projection applies to 2×2 states, got {}×{}",
            rho.dim(),
            rho.dim()
        )));
    }
    let m = rho.entries();
    // The diagonal entry equal to x⁽¹⁾ is read directly (not via 1 − ρ₁₁)
    // so that embed → project returns the inputs bit-for-bit.
    let (x1, x2, x3) = match target {
        SpinTarget::Up => (m[(1, 1)].re, -m[(0, 1)].re, -m[(0, 1)].im),
        SpinTarget::Down => (m[(0, 0)].re, m[(0, 1)].re, m[(0, 1)].im),
    };
    Ok(([x1, x2], x3))
}
