//! Simulation and analysis toolkit for a superconducting single-pole
//! double-throw microwave switch built from two quadrature hybrids and two
//! flux-tunable SQUID-array resonators.
//!
//! The crate is organised bottom-up:
//!
//! - [`netcore`]: ABCD / scattering-matrix algebra and port interconnection.
//! - [`elements`]: transmission lines, SQUID arrays, hybrids and the tunable resonator.
//! - [`switchnet`]: the composed four-port switch, operating points and figures of merit.
//! - [`fluxcal`]: coil-voltage to flux mapping, flux-map simulation and model fitting.
//! - [`nonlin`]: Kerr estimate, Duffing steady state and 1 dB compression.
//! - [`dynamics`]: time-domain switching with coupled-mode equations and step fits.
//! - [`quantum`]: single-photon routing, heterodyne moments, MLE and Wigner functions.
//!
//! [`optim`] holds the small numerical toolbox (Levenberg-Marquardt,
//! Nelder-Mead, bracketed 1-D searches) the modules above share.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod elements;
pub mod error;
pub mod fluxcal;
pub mod netcore;
pub mod nonlin;
pub mod optim;
pub mod quantum;
pub mod switchnet;

pub use error::{Error, Result};
pub use netcore::{Abcd, PhysicalConstants, SMatrix, C64};
