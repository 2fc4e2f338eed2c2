//! Simulation and analysis of the averaging process on the discrete torus.
//!
//! Each oriented edge `(x, e_i)` of `T_ε^d` carries a rate-`ε^{-2}` Poisson clock;
//! when it rings both endpoints are replaced by their average. The crate
//! provides the lattice calculus, heat kernels and their spectral constants,
//! an exact event-driven simulator, the Volterra recursion for the gradient
//! second moment, trajectory observables, a Malliavin-Poincaré check and an
//! experiment harness.

pub mod lattice;
pub mod malliavin;
pub mod moments;
pub mod observables;
pub mod quad;
pub mod sim;
pub mod spectral;
pub mod harness;
