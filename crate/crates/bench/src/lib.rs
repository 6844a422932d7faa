//! Fixtures shared by the benchmarks.

use drbsde_core::{AdaptedProcess, DynkinGame, Generator, Lattice, TerminalPayoff};

/// Israeli-option style game: `ξ = L = x⁺`, `U = x⁺ + δ`.
pub fn cancellable_call(lattice: Lattice, g: Generator, delta: f64) -> DynkinGame {
    let payoff = |x: f64| x.max(0.0);
    DynkinGame::new(
        TerminalPayoff::from_state_fn(lattice, payoff),
        g,
        AdaptedProcess::from_state_fn(lattice, |_, x| payoff(x)),
        AdaptedProcess::from_state_fn(lattice, |_, x| payoff(x) + delta),
    )
    .expect("obstacles are separated")
}
