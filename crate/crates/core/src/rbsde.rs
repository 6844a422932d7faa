//! One-obstacle reflected BSDEs: direct projection solver, the implicit
//! penalization driver, hitting times of the obstacle and the
//! Snell-envelope checks.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{self, assemble, g_evaluate, read_at, Backward, Solution, SolutionKind};
use crate::dynkin::{enumerate_stopping_rules, StoppingRule};
use crate::error::{Error, Result};
use crate::generator::{Generator, Point, Side};
use crate::io::fmt_f64;
use crate::lattice::{AdaptedProcess, Lattice, TerminalPayoff};
use crate::scheme::{self, Scheme};

pub(crate) fn check_terminal_order(
    lattice: &Lattice,
    xi: &TerminalPayoff,
    obstacle: &AdaptedProcess,
    side: Side,
) -> Result<()> {
    for (node, &x) in lattice.terminal_nodes().zip(xi.values()) {
        let o = obstacle.value(node);
        let bad = match side {
            Side::Lower => o > x,
            Side::Upper => o < x,
        };
        if bad {
            let rel = if side == Side::Lower { "L_T > xi" } else { "U_T < xi" };
            return Err(Error::TerminalOrder {
                node,
                step: lattice.steps(),
                detail: format!("{rel} ({o} vs {x})"),
            });
        }
    }
    Ok(())
}

fn solve_lower(lattice: &Lattice, xi: &TerminalPayoff, g: &Generator, lower: &AdaptedProcess, scheme: Scheme) -> Result<Solution> {
    let raw = Backward {
        lattice,
        g,
        scheme,
        lower: Some(lower),
        upper: None,
        frozen: None,
    }
    .run(xi.values())?;
    assemble(lattice, SolutionKind::ReflectedLower, g, scheme, raw, Some(lower.clone()), None)
}

/// RBSDE(ξ, g, obstacle): `Y_k = max(L_k, Ỹ_k)` for a lower obstacle. The
/// upper side is solved as the lower problem `(-ξ, g_-, -U)` and negated.
pub fn solve_rbsde(
    lattice: &Lattice,
    xi: &TerminalPayoff,
    g: &Generator,
    obstacle: &AdaptedProcess,
    side: Side,
    scheme: Scheme,
) -> Result<Solution> {
    xi.check_on(lattice)?;
    obstacle.check_on(lattice)?;
    g.check_on(lattice)?;
    check_terminal_order(lattice, xi, obstacle, side)?;
    match side {
        Side::Lower => solve_lower(lattice, xi, g, obstacle, scheme),
        Side::Upper => {
            let flipped = solve_lower(lattice, &xi.neg(), &g.negate_reflect(), &obstacle.neg(), scheme)?;
            let mut out = flipped.negated();
            out.rename_generator(g.name());
            Ok(out)
        }
    }
}

impl Solution {
    pub(crate) fn rename_generator(&mut self, name: &str) {
        self.meta_mut().generator = name.to_string();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenalizationLevel {
    pub n: f64,
    pub sup_gap: f64,
    /// Nodes where this level moved against the expected direction
    /// relative to the previous level.
    pub violations: usize,
    /// Propagated one-step bound on the gap; `None` when the monotone-step
    /// guard fails.
    pub envelope: Option<f64>,
    /// Largest path sum of `|Y^n - L|·ΔK^n`, `ΔK^n = dt·n·(L - Y^n)^+`.
    pub flat_off: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenalizationReport {
    pub side: Side,
    pub scheme: Scheme,
    pub levels: Vec<PenalizationLevel>,
    pub scale: f64,
    pub tolerance: f64,
    pub converged: bool,
    pub final_gap: f64,
}

impl PenalizationReport {
    pub fn total_violations(&self) -> usize {
        self.levels.iter().map(|l| l.violations).sum()
    }

    pub fn within_envelope(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.envelope.is_some_and(|e| l.sup_gap <= e * (1.0 + 1e-12) + 1e-15))
    }

    /// Writes `n,sup_gap,violations`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "sup_gap", "violations"])?;
        for l in &self.levels {
            w.write_record([fmt_f64(l.n), fmt_f64(l.sup_gap), l.violations.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::InvalidParameter("penalty schedule is empty".into()));
    }
    if schedule.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
        return Err(Error::InvalidParameter("penalty levels must be finite and non-negative".into()));
    }
    if schedule.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter("penalty schedule must be strictly increasing".into()));
    }
    Ok(())
}

/// Growth factor of the sup-norm error through one monotone backward step.
pub(crate) fn step_growth(g: &Generator, dt: f64, scheme: Scheme) -> f64 {
    let lp = g.constants().lambda.max(0.0);
    match scheme {
        Scheme::Explicit => 1.0 + dt * lp,
        Scheme::Implicit => 1.0 / (1.0 - dt * lp),
    }
}

/// Propagated bound on `sup |Y^n - Y|` for a lower obstacle:
/// `env_N = 0`, `env_k = max_k (L - Ỹ)^+ / (1 + dt·n) + growth·env_{k+1}`
/// with `Ỹ` the unreflected candidate of the reflected solution, so that
/// `(L - Ỹ)^+` is the recorded push `ΔK`.
pub(crate) fn penalty_envelope(
    lattice: &Lattice,
    g: &Generator,
    scheme: Scheme,
    dk: &AdaptedProcess,
    n: f64,
) -> Option<f64> {
    let dt = lattice.dt();
    if !g.monotone_guard(dt, scheme).holds {
        return None;
    }
    let growth = step_growth(g, dt, scheme);
    let mut env = 0.0;
    for k in (0..lattice.steps()).rev() {
        let local = lattice
            .nodes_at(k)
            .map(|node| dk.value(node))
            .fold(0.0f64, f64::max)
            / (1.0 + dt * n);
        env = match scheme {
            Scheme::Explicit => local + growth * env,
            Scheme::Implicit => growth * (local + env),
        };
    }
    Some(env)
}

fn penalized_flat_off(lattice: &Lattice, y: &AdaptedProcess, obstacle: &AdaptedProcess, side: Side, n: f64) -> f64 {
    let dt = lattice.dt();
    let n_steps = lattice.steps();
    bsde::max_path_sum(lattice, |node| {
        if lattice.step_of(node) == n_steps {
            return 0.0;
        }
        let gap = match side {
            Side::Lower => obstacle.value(node) - y.value(node),
            Side::Upper => y.value(node) - obstacle.value(node),
        };
        gap.max(0.0) * dt * n * gap.abs()
    })
}

/// Solves the penalized equations `g + n(y - L)^-` (or `g - n(y - U)^+`) for
/// every `n` in `schedule` and compares them with the reflected solution.
pub fn penalization_run(
    lattice: &Lattice,
    xi: &TerminalPayoff,
    g: &Generator,
    obstacle: &AdaptedProcess,
    side: Side,
    schedule: &[f64],
    scheme: Scheme,
) -> Result<(Vec<Solution>, PenalizationReport)> {
    check_schedule(schedule)?;
    let reference = solve_rbsde(lattice, xi, g, obstacle, side, scheme)?;
    let solutions: Vec<Solution> = schedule
        .par_iter()
        .map(|&n| {
            let gn = match side {
                Side::Lower => g.penalize_lower(obstacle, n)?,
                Side::Upper => g.penalize_upper(obstacle, n)?,
            };
            bsde::solve_bsde(lattice, xi, &gn, scheme)
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 + reference.y().sup_norm();
    let tolerance = 1e-6 * scale;
    let push = match side {
        Side::Lower => reference.dk(),
        Side::Upper => reference.dj(),
    };
    let env_g = match side {
        Side::Lower => g.clone(),
        Side::Upper => g.negate_reflect(),
    };
    let mut levels = Vec::with_capacity(schedule.len());
    for (i, (sol, &n)) in solutions.iter().zip(schedule).enumerate() {
        let violations = if i == 0 {
            0
        } else {
            let prev = solutions[i - 1].y();
            sol.y()
                .values()
                .iter()
                .zip(prev.values())
                .filter(|(a, b)| match side {
                    Side::Lower => a < b,
                    Side::Upper => a > b,
                })
                .count()
        };
        levels.push(PenalizationLevel {
            n,
            sup_gap: sol.y().max_abs_diff(reference.y()),
            violations,
            envelope: penalty_envelope(lattice, &env_g, scheme, push, n),
            flat_off: penalized_flat_off(lattice, sol.y(), obstacle, side, n),
        });
    }
    let final_gap = levels.last().map_or(f64::INFINITY, |l| l.sup_gap);
    let report = PenalizationReport {
        side,
        scheme,
        levels,
        scale,
        tolerance,
        converged: final_gap <= tolerance,
        final_gap,
    };
    Ok((solutions, report))
}

/// Default hitting tolerance `1e-9·(1 + |Y|∞)`.
pub fn default_eps_hit(solution: &Solution) -> f64 {
    1e-9 * (1.0 + solution.y().sup_norm())
}

/// First node at or after `nu` where `Y <= L + eps` (lower) or
/// `Y >= U - eps` (upper); the horizon otherwise.
pub fn first_hitting(solution: &Solution, nu: &StoppingRule, target: Side, eps_hit: Option<f64>) -> Result<StoppingRule> {
    nu.check_on(solution.lattice())?;
    let eps = eps_hit.unwrap_or_else(|| default_eps_hit(solution));
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("eps_hit must be non-negative, got {eps}")));
    }
    let y = solution.y();
    match target {
        Side::Lower => {
            let l = solution
                .lower()
                .ok_or_else(|| Error::InvalidParameter("solution carries no lower obstacle".into()))?;
            Ok(StoppingRule::hitting(nu, |n| y.value(n) <= l.value(n) + eps))
        }
        Side::Upper => {
            let u = solution
                .upper()
                .ok_or_else(|| Error::InvalidParameter("solution carries no upper obstacle".into()))?;
            Ok(StoppingRule::hitting(nu, |n| y.value(n) >= u.value(n) - eps))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnellMode {
    Backward,
    Enumerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnellReport {
    pub mode: SnellMode,
    pub side: Side,
    pub y0: f64,
    /// Backward mode: largest node gap to the independent recursion.
    pub recursion_gap: Option<f64>,
    /// Enumerate mode: best value over all stopping rules.
    pub enumerated_best: Option<f64>,
    pub enumerated_rules: usize,
    pub best_rule: Option<String>,
    pub sandwich_checks: usize,
    /// Largest excess in `E^g_{ν,γ}[Y_γ] <= Y_ν` (reversed for upper).
    pub sandwich_excess: f64,
    /// Largest gap in `E^g_{ν,τ♯(ν)∧γ}[Y] = Y_ν`.
    pub equality_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Reward `1{t<T}·obstacle + 1{t=T}·ξ`.
pub fn reward(lattice: &Lattice, obstacle: &AdaptedProcess, xi: &TerminalPayoff) -> AdaptedProcess {
    let n = lattice.steps();
    AdaptedProcess::from_fn(*lattice, |node| {
        if lattice.step_of(node) == n {
            xi.value_at_node(node)
        } else {
            obstacle.value(node)
        }
    })
}

fn snell_recursion(lattice: &Lattice, xi: &TerminalPayoff, g: &Generator, obstacle: &AdaptedProcess, side: Side, scheme: Scheme) -> Result<Vec<f64>> {
    let n = lattice.steps();
    let mut y = vec![0.0; lattice.node_count()];
    for node in lattice.terminal_nodes() {
        y[node] = xi.value_at_node(node);
    }
    let sq = lattice.sqrt_dt();
    for k in (0..n).rev() {
        for node in lattice.nodes_at(k) {
            let (d, u) = lattice.children(node);
            let e = (y[d] + y[u]) / 2.0;
            let z = (y[u] - y[d]) / (2.0 * sq);
            let s = [lattice.state(node)];
            let at = Point { t: lattice.time(k), step: k, node, state: &s };
            let c = scheme::step(g, &at, e, &[z], lattice.dt(), scheme)?.value;
            let o = obstacle.value(node);
            y[node] = match side {
                Side::Lower => c.max(o),
                Side::Upper => c.min(o),
            };
        }
    }
    Ok(y)
}

/// Checks that a one-obstacle solution is the g-Snell envelope of its
/// reward: by an independent recursion (backward) or by maximizing
/// `E^g_{0,γ}[R_γ]` over every stopping rule (enumerate, full tree,
/// `N <= 4`). Both modes also check the g-super(sub)martingale sandwich.
pub fn verify_snell(
    lattice: &Lattice,
    solution: &Solution,
    xi: &TerminalPayoff,
    g: &Generator,
    mode: SnellMode,
    scheme: Scheme,
    tolerance: f64,
) -> Result<SnellReport> {
    let (side, obstacle) = match solution.kind() {
        SolutionKind::ReflectedLower => (Side::Lower, solution.lower()),
        SolutionKind::ReflectedUpper => (Side::Upper, solution.upper()),
        _ => (Side::Lower, None),
    };
    let obstacle = obstacle.ok_or_else(|| {
        Error::InvalidParameter("Snell verification needs a one-obstacle solution".into())
    })?;
    let y = solution.y();
    y.check_on(lattice)?;
    let sign = if side == Side::Lower { 1.0 } else { -1.0 };
    let y0 = solution.y0();
    let mut report = SnellReport {
        mode,
        side,
        y0,
        recursion_gap: None,
        enumerated_best: None,
        enumerated_rules: 0,
        best_rule: None,
        sandwich_checks: 0,
        sandwich_excess: 0.0,
        equality_gap: 0.0,
        tolerance,
        pass: false,
    };

    let (nus, gammas): (Vec<StoppingRule>, Vec<StoppingRule>) = match mode {
        SnellMode::Backward => {
            let direct = snell_recursion(lattice, xi, g, obstacle, side, scheme)?;
            let gap = direct
                .iter()
                .zip(y.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            report.recursion_gap = Some(gap);
            let n = lattice.steps();
            let stride = n.div_ceil(8).max(1);
            let nus = (0..n).step_by(stride).map(|k| StoppingRule::at_step(*lattice, k)).collect();
            let gammas = (0..=n).step_by(stride).map(|k| StoppingRule::at_step(*lattice, k)).collect();
            (nus, gammas)
        }
        SnellMode::Enumerate => {
            let rules = enumerate_stopping_rules(lattice)?;
            let root = StoppingRule::immediate(*lattice);
            let r = reward(lattice, obstacle, xi);
            let values: Vec<f64> = rules
                .par_iter()
                .map(|gm| g_evaluate(lattice, &root, gm, &r, g, scheme).map(|p| p.root()))
                .collect::<Result<_>>()?;
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                if sign * v > sign * values[best] {
                    best = i;
                }
            }
            report.enumerated_best = Some(values[best]);
            report.enumerated_rules = rules.len();
            report.best_rule = Some(rules[best].digest());
            let step = (rules.len() / 25).max(1);
            let nus = rules.iter().step_by(step).cloned().collect();
            (nus, rules)
        }
    };

    for nu in &nus {
        let sharp = first_hitting(solution, nu, side, None)?;
        let at_nu: Vec<(usize, f64)> = read_at(nu, y);
        for gm in &gammas {
            let gm = gm.latest(nu)?;
            let e = g_evaluate(lattice, nu, &gm, y, g, scheme)?;
            for &(node, v) in &at_nu {
                report.sandwich_excess = report.sandwich_excess.max(sign * (e.value(node) - v));
            }
            let stop = sharp.earliest(&gm)?;
            let e = g_evaluate(lattice, nu, &stop, y, g, scheme)?;
            for &(node, v) in &at_nu {
                report.equality_gap = report.equality_gap.max((e.value(node) - v).abs());
            }
            report.sandwich_checks += 1;
        }
    }

    let mut pass = report.sandwich_excess <= tolerance && report.equality_gap <= tolerance;
    if let Some(gap) = report.recursion_gap {
        pass &= gap <= tolerance;
    }
    if let Some(best) = report.enumerated_best {
        pass &= (best - y0).abs() <= tolerance;
    }
    report.pass = pass;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;

    #[test]
    fn never_binding_obstacle_is_plain_bsde() {
        let l = Lattice::recombining(1.0, 12).unwrap();
        let xi = TerminalPayoff::from_state_fn(l, |x| x.sin());
        let g = Generator::sine(-1.0, 0.5);
        let low = AdaptedProcess::constant(l, -1e6);
        let r = solve_rbsde(&l, &xi, &g, &low, Side::Lower, Scheme::Explicit).unwrap();
        let p = solve_bsde(&l, &xi, &g, Scheme::Explicit).unwrap();
        assert_eq!(r.y().values(), p.y().values());
        assert!(r.dk().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attained_zero_obstacle() {
        let l = Lattice::recombining(1.0, 5).unwrap();
        let zero = AdaptedProcess::constant(l, 0.0);
        let r = solve_rbsde(&l, &TerminalPayoff::constant(l, 0.0), &Generator::zero(), &zero, Side::Lower, Scheme::Explicit).unwrap();
        assert!(r.y().values().iter().all(|&v| v == 0.0));
        assert!(r.dk().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_reward_snell_envelope() {
        let l = Lattice::full_tree(1.0, 4).unwrap();
        let low = AdaptedProcess::from_fn(l, |n| 1.0 - l.time(l.step_of(n)));
        let xi = TerminalPayoff::constant(l, 0.0);
        let r = solve_rbsde(&l, &xi, &Generator::zero(), &low, Side::Lower, Scheme::Explicit).unwrap();
        // hand recursion over the grid times: V_k = max(1 - t_k, V_{k+1})
        let mut v: f64 = 0.0;
        for k in (0..4).rev() {
            v = v.max(1.0 - k as f64 / 4.0);
        }
        assert_eq!(r.y0(), v);
        assert_eq!(r.y0(), 1.0);
        let tau = first_hitting(&r, &StoppingRule::immediate(l), Side::Lower, None).unwrap();
        assert!(tau.is_stopped(0));
        let rep = verify_snell(&l, &r, &xi, &Generator::zero(), SnellMode::Enumerate, Scheme::Explicit, 1e-12).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.enumerated_rules, 677);
    }

    #[test]
    fn terminal_order_is_enforced() {
        let l = Lattice::recombining(1.0, 2).unwrap();
        let low = AdaptedProcess::constant(l, 1.0);
        let r = solve_rbsde(&l, &TerminalPayoff::constant(l, 0.0), &Generator::zero(), &low, Side::Lower, Scheme::Explicit);
        assert!(matches!(r, Err(Error::TerminalOrder { .. })));
    }

    #[test]
    fn upper_side_is_the_flipped_lower_side() {
        let l = Lattice::recombining(1.0, 16).unwrap();
        let xi = TerminalPayoff::from_state_fn(l, |x| x.abs() - 0.3);
        let up = AdaptedProcess::from_state_fn(l, |t, x| 0.2 + x.abs() + 0.1 * t);
        let g = Generator::sine(-0.5, 0.7);
        let r = solve_rbsde(&l, &xi, &g, &up, Side::Upper, Scheme::Explicit).unwrap();
        assert_eq!(r.kind(), SolutionKind::ReflectedUpper);
        assert!(r.y().values().iter().zip(up.values()).all(|(y, u)| y <= u));
        let rep = verify_snell(&l, &r, &xi, &g, SnellMode::Backward, Scheme::Explicit, 1e-12).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(r.flat_off_residuals(), (0.0, 0.0));
    }

    #[test]
    fn penalization_levels_increase_to_the_reflected_solution() {
        let l = Lattice::recombining(1.0, 32).unwrap();
        let xi = TerminalPayoff::from_state_fn(l, |x| (x - 0.2).max(0.0));
        let low = AdaptedProcess::from_state_fn(l, |_, x| 0.4 - x * x);
        let xi = TerminalPayoff::new(l, l.terminal_nodes().zip(xi.values()).map(|(n, v)| v.max(low.value(n))).collect()).unwrap();
        let g = Generator::sine(-0.5, 0.5);
        let sched: Vec<f64> = (0..=10).map(|i| 2f64.powi(i)).collect();
        let (sols, rep) = penalization_run(&l, &xi, &g, &low, Side::Lower, &sched, Scheme::Explicit).unwrap();
        assert_eq!(sols.len(), sched.len());
        assert_eq!(rep.total_violations(), 0);
        assert!(rep.within_envelope(), "{rep:?}");
        assert!(rep.final_gap <= 1e-2 * rep.scale);
        assert!(rep.levels.windows(2).all(|w| w[1].sup_gap <= w[0].sup_gap));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n,sup_gap,violations\n"));
    }

    #[test]
    fn level_zero_is_the_plain_solution() {
        let l = Lattice::recombining(1.0, 8).unwrap();
        let xi = TerminalPayoff::from_state_fn(l, |x| x);
        let low = AdaptedProcess::constant(l, -5.0);
        let g = Generator::linear(-0.3, 0.2);
        let (sols, _) = penalization_run(&l, &xi, &g, &low, Side::Lower, &[0.0], Scheme::Explicit).unwrap();
        let p = solve_bsde(&l, &xi, &g, Scheme::Explicit).unwrap();
        assert_eq!(sols[0].y().values(), p.y().values());
        assert!(penalization_run(&l, &xi, &g, &low, Side::Lower, &[2.0, 1.0], Scheme::Explicit).is_err());
    }
}
