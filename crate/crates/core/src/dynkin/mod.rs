//! Dynkin games on the full tree: payoff `R(τ, γ)`, strategy values under
//! g-evaluation, the exhaustive sup-inf / inf-sup oracle and the
//! saddle-point check for the hitting times of `Y` on the obstacles.

mod rule;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rule::{count_stopping_rules, enumerate_stopping_rules, StoppingRule, MAX_ENUMERATION_STEPS};

use crate::bsde::Solution;
use crate::drbsde::{solve_drbsde, DynkinGame};
use crate::error::{Error, Result};
use crate::generator::{Generator, Point, Side};
use crate::io::fmt_f64;
use crate::lattice::Lattice;
use crate::rbsde::first_hitting;
use crate::scheme::{self, Scheme};

/// Obstacle scale above which tolerances are applied relative to it.
const RESCALE_ABOVE: f64 = 1e3;

fn require_tree(lattice: &Lattice) -> Result<()> {
    if !lattice.is_full_tree() {
        return Err(Error::UnsupportedMode("Dynkin games are played on the full tree".into()));
    }
    Ok(())
}

/// `R` at the node where `τ ∧ γ` stops: `U` if `γ` has stopped before the
/// horizon, else `L` if `τ` has, else `ξ`.
fn payoff_at(game: &DynkinGame, tau: &StoppingRule, gamma: &StoppingRule, node: usize) -> f64 {
    let lat = game.lattice();
    if lat.step_of(node) == lat.steps() {
        game.xi().value_at_node(node)
    } else if gamma.is_stopped(node) {
        game.upper().value(node)
    } else if tau.is_stopped(node) {
        game.lower().value(node)
    } else {
        f64::NAN
    }
}

/// `R(τ, γ) = 1{τ<γ} L_τ + 1{γ<=τ, γ<T} U_γ + 1{τ=γ=T} ξ` on the path
/// ending at terminal node `path`.
pub fn payoff_r(tau: &StoppingRule, gamma: &StoppingRule, path: usize, game: &DynkinGame) -> Result<f64> {
    let lat = game.lattice();
    require_tree(lat)?;
    tau.check_on(lat)?;
    gamma.check_on(lat)?;
    if lat.step_of(path) != lat.steps() {
        return Err(Error::InvalidParameter(format!("node {path} is not terminal")));
    }
    let mut chain = vec![path];
    while let Some(p) = lat.parent(*chain.last().expect("non-empty")) {
        chain.push(p);
    }
    let node = chain
        .into_iter()
        .rev()
        .find(|&n| tau.is_stopped(n) || gamma.is_stopped(n))
        .expect("terminal nodes are stopped");
    Ok(payoff_at(game, tau, gamma, node))
}

/// Root value of the BSDE driven by `g`, frozen where `stopped` holds.
fn frozen_root(
    lattice: &Lattice,
    g: &Generator,
    scheme: Scheme,
    stopped: impl Fn(usize) -> bool,
    payoff: impl Fn(usize) -> f64,
    scratch: &mut [f64],
) -> Result<f64> {
    let n = lattice.steps();
    let dt = lattice.dt();
    let denom = 2.0 * lattice.sqrt_dt();
    for node in lattice.terminal_nodes() {
        scratch[node] = payoff(node);
    }
    for k in (0..n).rev() {
        for node in lattice.nodes_at(k) {
            scratch[node] = if stopped(node) {
                payoff(node)
            } else {
                let (d, u) = lattice.children(node);
                let e = 0.5 * (scratch[u] + scratch[d]);
                let z = (scratch[u] - scratch[d]) / denom;
                let s = [lattice.state(node)];
                let at = Point {
                    t: lattice.time(k),
                    step: k,
                    node,
                    state: &s,
                };
                scheme::step(g, &at, e, &[z], dt, scheme)?.value
            };
        }
    }
    Ok(scratch[0])
}

fn value_of(game: &DynkinGame, tau: &StoppingRule, gamma: &StoppingRule, scheme: Scheme, scratch: &mut [f64]) -> Result<f64> {
    let lat = game.lattice();
    frozen_root(
        lat,
        game.g(),
        scheme,
        |n| tau.is_stopped(n) || gamma.is_stopped(n),
        |n| payoff_at(game, tau, gamma, n),
        scratch,
    )
}

/// `E^g_{0, τ∧γ}[R(τ, γ)]`.
pub fn strategy_value(lattice: &Lattice, game: &DynkinGame, tau: &StoppingRule, gamma: &StoppingRule, scheme: Scheme) -> Result<f64> {
    require_tree(lattice)?;
    tau.check_on(lattice)?;
    gamma.check_on(lattice)?;
    game.xi().check_on(lattice)?;
    let mut scratch = vec![0.0; lattice.node_count()];
    value_of(game, tau, gamma, scheme, &mut scratch)
}

/// Values of every `(τ_i, γ_j)` pair, row-major in `τ`.
#[derive(Clone, Debug)]
pub struct PairTable {
    pub rules: Vec<StoppingRule>,
    pub values: Vec<f64>,
}

impl PairTable {
    pub fn value(&self, tau: usize, gamma: usize) -> f64 {
        self.values[tau * self.rules.len() + gamma]
    }

    /// Writes `tau,gamma,tau_rule,gamma_rule,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let digests: Vec<String> = self.rules.iter().map(StoppingRule::digest).collect();
        let m = self.rules.len();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "gamma", "tau_rule", "gamma_rule", "value"])?;
        for i in 0..m {
            for j in 0..m {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    digests[i].clone(),
                    digests[j].clone(),
                    fmt_f64(self.values[i * m + j]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub y0: f64,
    pub rules: usize,
    pub sup_inf: Option<f64>,
    pub inf_sup: Option<f64>,
    /// Enumeration indices and digests of the attaining `(τ̂, γ̂)`.
    pub optimal_pair: Option<(usize, usize)>,
    pub optimal_rules: Option<(String, String)>,
    pub saddle_rules: Option<(String, String)>,
    pub saddle_value: Option<f64>,
    /// Largest violation of the two saddle inequalities over all deviations.
    pub max_saddle_violation: Option<f64>,
    /// Largest violation of the sub/super-martingale sandwich.
    pub max_sandwich_violation: Option<f64>,
    pub sandwich_checks: usize,
    pub tolerance: f64,
    pub pass: bool,
}

fn effective_tolerance(game: &DynkinGame, tol: f64) -> f64 {
    let s = game.scale();
    if s > RESCALE_ABOVE {
        tol * s
    } else {
        tol
    }
}

/// Brute force over every pair of stopping rules (full tree, `N <= 4`).
pub fn game_value_oracle(lattice: &Lattice, game: &DynkinGame, scheme: Scheme, tolerance: f64) -> Result<(GameReport, PairTable)> {
    require_tree(lattice)?;
    let rules = enumerate_stopping_rules(lattice)?;
    let m = rules.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut scratch = vec![0.0; lattice.node_count()];
            rules
                .iter()
                .map(|gm| value_of(game, &rules[i], gm, scheme, &mut scratch))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    let table = PairTable { rules, values };

    let mut best_tau = (0, f64::NEG_INFINITY);
    for i in 0..m {
        let row_min = (0..m).map(|j| table.value(i, j)).fold(f64::INFINITY, f64::min);
        if row_min > best_tau.1 {
            best_tau = (i, row_min);
        }
    }
    let mut best_gamma = (0, f64::INFINITY);
    for j in 0..m {
        let col_max = (0..m).map(|i| table.value(i, j)).fold(f64::NEG_INFINITY, f64::max);
        if col_max < best_gamma.1 {
            best_gamma = (j, col_max);
        }
    }
    let y0 = solve_drbsde(lattice, game, scheme)?.y0();
    let tol = effective_tolerance(game, tolerance);
    let pass = best_tau.1 <= best_gamma.1 + tol && (best_tau.1 - y0).abs() <= tol && (best_gamma.1 - y0).abs() <= tol;
    let report = GameReport {
        y0,
        rules: m,
        sup_inf: Some(best_tau.1),
        inf_sup: Some(best_gamma.1),
        optimal_pair: Some((best_tau.0, best_gamma.0)),
        optimal_rules: Some((table.rules[best_tau.0].digest(), table.rules[best_gamma.0].digest())),
        tolerance: tol,
        pass,
        ..GameReport::default()
    };
    Ok((report, table))
}

/// Checks that the first hitting times `τ*` of `L` and `γ*` of `U` form a
/// saddle point: `V(τ, γ*) <= Y_0 <= V(τ*, γ)` for every enumerated
/// deviation and `V(τ*, γ*) = Y_0`. Also checks the sandwich
/// `E^g_{ν,τ∧γ*_ν}[Y] <= Y_ν <= E^g_{ν,τ*_ν∧γ}[Y]` on a sample of `ν`.
pub fn verify_saddle(lattice: &Lattice, game: &DynkinGame, solution: &Solution, scheme: Scheme, tolerance: f64) -> Result<GameReport> {
    require_tree(lattice)?;
    solution.y().check_on(lattice)?;
    let rules = enumerate_stopping_rules(lattice)?;
    let root = StoppingRule::immediate(*lattice);
    let tau_star = first_hitting(solution, &root, Side::Lower, Some(0.0))?;
    let gamma_star = first_hitting(solution, &root, Side::Upper, Some(0.0))?;
    let y0 = solution.y0();
    let tol = effective_tolerance(game, tolerance);

    let deviations: Vec<f64> = rules
        .par_iter()
        .map(|r| -> Result<f64> {
            let mut scratch = vec![0.0; lattice.node_count()];
            let against_gamma = value_of(game, r, &gamma_star, scheme, &mut scratch)? - y0;
            let against_tau = y0 - value_of(game, &tau_star, r, scheme, &mut scratch)?;
            Ok(against_gamma.max(against_tau).max(0.0))
        })
        .collect::<Result<_>>()?;
    let max_saddle = deviations.into_iter().fold(0.0, f64::max);
    let saddle_value = strategy_value(lattice, game, &tau_star, &gamma_star, scheme)?;

    let y = solution.y();
    let g = game.g();
    let stride = (rules.len() / 20).max(1);
    let nus: Vec<&StoppingRule> = rules.iter().step_by(stride).collect();
    let sandwich: Vec<(f64, usize)> = nus
        .par_iter()
        .map(|nu| -> Result<(f64, usize)> {
            let ts = first_hitting(solution, nu, Side::Lower, Some(0.0))?;
            let gs = first_hitting(solution, nu, Side::Upper, Some(0.0))?;
            let mut scratch = vec![0.0; lattice.node_count()];
            let mut worst = 0.0f64;
            let mut checks = 0;
            for r in &rules {
                let r = r.latest(nu)?;
                let below = r.earliest(&gs)?;
                let above = ts.earliest(&r)?;
                for node in nu.first_stop_nodes() {
                    let lo = subtree_value(lattice, g, scheme, node, &below, y.values(), &mut scratch)?;
                    let hi = subtree_value(lattice, g, scheme, node, &above, y.values(), &mut scratch)?;
                    let v = y.value(node);
                    worst = worst.max(lo - v).max(v - hi);
                }
                checks += 1;
            }
            Ok((worst, checks))
        })
        .collect::<Result<_>>()?;
    let max_sandwich = sandwich.iter().fold(0.0f64, |a, s| a.max(s.0));
    let sandwich_checks = sandwich.iter().map(|s| s.1).sum();

    let pass = max_saddle <= tol && (saddle_value - y0).abs() <= tol && max_sandwich <= tol;
    Ok(GameReport {
        y0,
        rules: rules.len(),
        saddle_rules: Some((tau_star.digest(), gamma_star.digest())),
        saddle_value: Some(saddle_value),
        max_saddle_violation: Some(max_saddle),
        max_sandwich_violation: Some(max_sandwich),
        sandwich_checks,
        tolerance: tol,
        pass,
        ..GameReport::default()
    })
}

/// `E^g_{node, stop}[Y_stop]` on the subtree below `node` of a full tree.
fn subtree_value(
    lattice: &Lattice,
    g: &Generator,
    scheme: Scheme,
    top: usize,
    stop: &StoppingRule,
    y: &[f64],
    scratch: &mut [f64],
) -> Result<f64> {
    let n = lattice.steps();
    let k0 = lattice.step_of(top);
    let p0 = lattice.local_index(top);
    let dt = lattice.dt();
    let denom = 2.0 * lattice.sqrt_dt();
    for k in (k0..=n).rev() {
        let span = 1usize << (k - k0);
        let first = lattice.offset(k) + (p0 << (k - k0));
        for node in first..first + span {
            scratch[node] = if stop.is_stopped(node) || k == n {
                y[node]
            } else {
                let (d, u) = lattice.children(node);
                let e = 0.5 * (scratch[u] + scratch[d]);
                let z = (scratch[u] - scratch[d]) / denom;
                let s = [lattice.state(node)];
                let at = Point {
                    t: lattice.time(k),
                    step: k,
                    node,
                    state: &s,
                };
                scheme::step(g, &at, e, &[z], dt, scheme)?.value
            };
        }
    }
    Ok(scratch[top])
}
