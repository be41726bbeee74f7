//! Conservative finite-volume machinery for coagulation-fragmentation
//! dynamics with homogeneous coefficients, and for computing mass-conserving
//! self-similar profiles as steady states of the rescaled flow.
//!
//! Layout:
//! - [`coefficients`]: kernel/rate family, daughter profiles, mollification,
//!   mass threshold and auxiliary exponents;
//! - [`grid`]: geometric mesh, cell-averaged spectra, moments, distances;
//! - [`operators`]: discrete coagulation, fragmentation and rescaling
//!   transport in conservative flux form, plus weak-form pairings;
//! - [`dynamics`]: explicit time integration in physical or rescaled
//!   variables, exact scale maps, gelation monitoring;
//! - [`profile`]: steady-state profile solver, residual certificates,
//!   eps-sweep;
//! - [`diagnostics`]: stand-alone inequality and functional checkers;
//! - [`oracle`]: closed-form solutions used for validation;
//! - [`report`]: CSV/manifest writers.

pub mod coefficients;
pub mod diagnostics;
pub mod dynamics;
pub mod grid;
pub mod operators;
pub mod oracle;
pub mod profile;
pub mod quad;
pub mod report;
