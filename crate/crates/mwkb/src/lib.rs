//! Semiclassical phase-space propagation for Weyl symbols.
//!
//! The crate evolves the Weyl symbols of the Schrodinger evolution operator
//! U(t,x) and the Heisenberg-evolved density matrix rho(t,x) in their leading
//! WKB form: boundary-condition solves on an extended phase space produce
//! loops of chords and trajectory arcs whose symplectic areas are the phases,
//! while amplitudes come from midpoint-map determinants. Exact references
//! (closed-form quadratic evolution; a split-step grid solver plus Wigner
//! transforms) and a numerical Moyal star product cross-validate the fields.
//!
//! Entry points:
//! - [`hamiltonian::Hamiltonian`] / [`hamiltonian::InitialPhaseData`]: problem setup
//! - [`flow::flow`]: classical trajectories with Jacobi fields
//! - [`bc`]: midpoint boundary-condition solving, caustics, Maslov indices
//! - [`wkb`]: the semiclassical fields and their invariants
//! - [`weyl`]: Wigner transforms and the star product
//! - [`oracle`]: exact grid references
//! - [`scenario`]: config-driven runs (also behind the `mwkb` binary)
//!
//! The runnable examples under `examples/` walk one capability each; start
//! with `flow_trajectory` and `quadratic_exactness`.

pub mod bc;
pub mod error;
pub mod expr;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod hamiltonian;
pub mod ode;
pub mod oracle;
pub mod scenario;
pub mod sps;
pub mod weyl;
pub mod wkb;

pub use error::{MwkbError, Result};
