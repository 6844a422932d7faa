//! Seeded random problems shared by tests, benches and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::drbsde::DynkinGame;
use crate::error::Result;
use crate::generator::Generator;
use crate::lattice::{AdaptedProcess, Lattice, TerminalPayoff};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth random centre `a·sin(ω x + φ) + b·t`.
fn centre(r: &mut ChaCha8Rng) -> impl Fn(f64, f64) -> f64 + Copy {
    let a = r.random_range(0.1..0.6);
    let w = r.random_range(0.5..2.0);
    let p = r.random_range(-1.0..1.0);
    let b = r.random_range(-0.2..0.2);
    move |t: f64, x: f64| a * (w * x + p).sin() + b * t
}

/// A game with obstacles `centre ∓ width` (widths drawn per node) and a
/// terminal value scattered around the centre, so both obstacles bind.
pub fn random_game(lattice: &Lattice, g: Generator, seed: u64) -> Result<DynkinGame> {
    let mut r = rng(seed);
    let c = centre(&mut r);
    let lat = *lattice;
    let n = lat.steps();
    let mut lower = Vec::with_capacity(lat.node_count());
    let mut upper = Vec::with_capacity(lat.node_count());
    for node in 0..lat.node_count() {
        let k = lat.step_of(node);
        let m = c(lat.time(k), lat.state(node));
        lower.push(m - r.random_range(0.05..0.4));
        upper.push(m + r.random_range(0.05..0.4));
    }
    let mut xi = Vec::with_capacity(lat.width(n));
    for node in lat.terminal_nodes() {
        let v = c(lat.horizon(), lat.state(node)) + r.random_range(-0.8..0.8);
        lower[node] = lower[node].min(v);
        upper[node] = upper[node].max(v);
        xi.push(v);
    }
    DynkinGame::new(
        TerminalPayoff::new(lat, xi)?,
        g,
        AdaptedProcess::new(lat, lower)?,
        AdaptedProcess::new(lat, upper)?,
    )
}

/// `(ξ, L)` with `L_T <= ξ` and `L` binding on part of the lattice.
pub fn random_lower_problem(lattice: &Lattice, seed: u64) -> Result<(TerminalPayoff, AdaptedProcess)> {
    let mut r = rng(seed);
    let c = centre(&mut r);
    let lat = *lattice;
    let shift = r.random_range(-0.2..0.2);
    let mut lower: Vec<f64> = (0..lat.node_count())
        .map(|n| c(lat.time(lat.step_of(n)), lat.state(n)) + shift)
        .collect();
    let xi: Vec<f64> = lat
        .terminal_nodes()
        .map(|n| c(lat.horizon(), lat.state(n)) + r.random_range(-0.6..0.6))
        .collect();
    for (node, &v) in lat.terminal_nodes().zip(&xi) {
        lower[node] = lower[node].min(v);
    }
    Ok((TerminalPayoff::new(lat, xi)?, AdaptedProcess::new(lat, lower)?))
}

/// Uniform draws in `[lo, hi)` at every node.
pub fn random_process(lattice: &Lattice, lo: f64, hi: f64, seed: u64) -> AdaptedProcess {
    let mut r = rng(seed);
    let v = (0..lattice.node_count()).map(|_| r.random_range(lo..hi)).collect();
    AdaptedProcess::new(*lattice, v).expect("length matches")
}

/// Uniform terminal draws in `[lo, hi)`.
pub fn random_terminal(lattice: &Lattice, lo: f64, hi: f64, seed: u64) -> TerminalPayoff {
    let mut r = rng(seed);
    let v = lattice.terminal_nodes().map(|_| r.random_range(lo..hi)).collect();
    TerminalPayoff::new(*lattice, v).expect("length matches")
}
