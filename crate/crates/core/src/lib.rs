//! Numerical toolkit for the transmutation approach to inverse coefficient
//! problems for `sigma u_t = a(x) u_xx - p(x) u`.

pub mod carleman;
pub mod corelab;
pub mod evolve;
pub mod goursat;
pub mod recon;
pub mod transform;
mod tridiag;
