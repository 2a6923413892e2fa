//! Delay-robust stability certificates and stochastic simulation for
//! measurement-feedback control of quantum spin systems.
//!
//! The crate has two halves that meet in the middle:
//!
//! * **Certification** — [`poly`] provides exact-rational multivariate
//!   polynomial algebra, [`sdp`] a small dense semidefinite solver, and
//!   [`sos`] sum-of-squares encodings on top of it. [`certifier`] assembles
//!   the delay-stability conditions for a [`certifier::DelaySystem`] and
//!   produces an exactly verifiable [`certifier::StabilityCertificate`].
//! * **Simulation** — [`quantum`] models the controlled stochastic master
//!   equation of a continuously monitored spin ensemble and its exact
//!   reduction to a two-dimensional delayed diffusion; [`simulator`]
//!   integrates either form with reproducible counter-seeded noise and
//!   Monte Carlo ensembles.
//!
//! The `qdelay` binary exposes both halves as subcommands; see the book
//! under `book/` for a guided tour.

pub mod certifier;
pub mod cli;
pub mod poly;
pub mod quantum;
pub mod sdp;
pub mod simulator;
pub mod sos;
