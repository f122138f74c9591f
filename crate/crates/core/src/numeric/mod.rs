//! Shared numerical routines: bracketed root finding, adaptive quadrature,
//! an adaptive explicit ODE integrator and a bounded-variable least-squares
//! solver.

pub mod bvls;
pub mod ode;
pub mod quad;
pub mod root;

/// Deterministic 64-bit mixer (splitmix64 finalizer). Used to derive
/// counter-based RNG streams from (seed, indices) tuples.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
