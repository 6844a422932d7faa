//! Dispatch of one experiment and the files it writes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use drbsde_core::io::fmt_f64;
use drbsde_core::lattice::conditional_expectation;
use drbsde_core::rbsde::SnellMode;
use drbsde_core::{
    check_hypotheses, cross_validate, double_penalization, enumerate_stopping_rules, game_value_oracle,
    pasting_construct, penalization_run, penalization_squeeze, sample_axiom_cases, simulate_paths, solve_bsde,
    solve_drbsde, solve_mc, solve_rbsde, verify_evaluation_axioms, verify_saddle, verify_snell, AdaptedProcess,
    Direction, DynkinGame, Generator, Lattice, McOptions, McProblem, SamplingBox, Scheme, Side, Solution,
    TerminalPayoff,
};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{
    ExperimentConfig, Kind, DEFAULT_AXIOM_SAMPLES, DEFAULT_HYPOTHESIS_SAMPLES, DEFAULT_PENALTY_LEVEL,
    DEFAULT_SAMPLING_RADIUS,
};
use crate::expr::Expr;

/// One pinned comparison `value <= limit`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value <= limit,
        }
    }

    fn holds(name: &str, pass: bool) -> Self {
        Self {
            name: name.into(),
            value: if pass { 0.0 } else { 1.0 },
            limit: 0.0,
            pass,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub kind: Kind,
    pub pass: bool,
    pub y0: Option<f64>,
    pub checks: Vec<Check>,
    pub details: Value,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub kind: Kind,
    pub pass: bool,
    pub y0: Option<f64>,
    pub out_dir: PathBuf,
    pub failed: Vec<Check>,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    kind: Kind,
    config_sha256: String,
    seed: u64,
    jobs: usize,
    pass: bool,
    files: &'a [FileEntry],
    wall_time_seconds: f64,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(FileEntry {
            name: name.into(),
            sha256: hex(&Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> drbsde_core::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.put(name, &buf)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse(src: &Option<String>) -> Option<Arc<Expr>> {
    src.as_ref().map(|s| Arc::new(s.parse().expect("validated")))
}

struct Data {
    lattice: Lattice,
    g: Generator,
    xi: Option<TerminalPayoff>,
    lower: Option<AdaptedProcess>,
    upper: Option<AdaptedProcess>,
}

impl Data {
    fn build(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> Result<Self> {
        let lattice = cfg.lattice.build()?;
        let g = cfg.generator.build(base_dir)?;
        let horizon = lattice.horizon();
        let xi = parse(&cfg.terminal).map(|e| TerminalPayoff::from_state_fn(lattice, |x| e.eval(horizon, x)));
        let process = |e: Arc<Expr>| AdaptedProcess::from_state_fn(lattice, |t, x| e.eval(t, x));
        Ok(Self {
            lattice,
            g,
            xi,
            lower: parse(&cfg.lower).map(process),
            upper: parse(&cfg.upper).map(process),
        })
    }

    fn xi(&self) -> &TerminalPayoff {
        self.xi.as_ref().expect("validated")
    }

    fn game(&self) -> Result<DynkinGame> {
        Ok(DynkinGame::new(
            self.xi().clone(),
            self.g.clone(),
            self.lower.clone().expect("validated"),
            self.upper.clone().expect("validated"),
        )?)
    }

    fn obstacle(&self, side: Side) -> &AdaptedProcess {
        match side {
            Side::Lower => self.lower.as_ref(),
            Side::Upper => self.upper.as_ref(),
        }
        .expect("validated")
    }

    /// `1 + max(|ξ|∞, |L|∞, |U|∞)`.
    fn scale(&self) -> f64 {
        let xi = self.xi.as_ref().map_or(0.0, |x| x.values().iter().fold(0.0f64, |a, v| a.max(v.abs())));
        let l = self.lower.as_ref().map_or(0.0, |p| p.sup_norm());
        let u = self.upper.as_ref().map_or(0.0, |p| p.sup_norm());
        1.0 + xi.max(l).max(u)
    }
}

fn solution_checks(sol: &Solution, checks: &mut Vec<Check>) {
    let lat = sol.lattice();
    let y = sol.y();
    let mut below = 0.0f64;
    let mut above = 0.0f64;
    let mut both = 0usize;
    for node in 0..lat.node_count() {
        if let Some(l) = sol.lower() {
            below = below.max(l.value(node) - y.value(node));
        }
        if let Some(u) = sol.upper() {
            above = above.max(y.value(node) - u.value(node));
        }
        if sol.dk().value(node) > 0.0 && sol.dj().value(node) > 0.0 {
            both += 1;
        }
    }
    let (fl, fu) = sol.flat_off_residuals();
    if sol.lower().is_some() {
        checks.push(Check::at_most("obstacle_lower_violation", below, 0.0));
        checks.push(Check::at_most("flat_off_lower", fl, 0.0));
    }
    if sol.upper().is_some() {
        checks.push(Check::at_most("obstacle_upper_violation", above, 0.0));
        checks.push(Check::at_most("flat_off_upper", fu, 0.0));
    }
    if sol.lower().is_some() && sol.upper().is_some() {
        checks.push(Check::at_most("simultaneous_push_nodes", both as f64, 0.0));
    }
}

/// Largest node-wise residual of the backward step and of the `Z`
/// representation, recomputed from the stored solution.
fn backward_residual(sol: &Solution, g: &Generator, scheme: Scheme) -> Result<(f64, f64)> {
    let lat = sol.lattice();
    let (dt, sq) = (lat.dt(), lat.sqrt_dt());
    let mut worst_y = 0.0f64;
    let mut worst_z = 0.0f64;
    for k in 0..lat.steps() {
        let next = sol.y().at_step(k + 1);
        let mean = conditional_expectation(lat, k, next)?;
        for (i, node) in lat.nodes_at(k).enumerate() {
            let (d, u) = lat.local_children(i);
            let z = (next[u] - next[d]) / (2.0 * sq);
            let y = sol.y().value(node);
            let at = match scheme {
                Scheme::Explicit => mean[i],
                Scheme::Implicit => y,
            };
            let rhs = mean[i] + dt * g.eval_scalar(lat.time(k), k, node, lat.state(node), at, z);
            worst_y = worst_y.max((y - rhs).abs());
            worst_z = worst_z.max((sol.z().value(node) - z).abs());
        }
    }
    Ok((worst_y, worst_z))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn solve(cfg: &ExperimentConfig, data: &Data, out: &mut Outputs) -> Result<(Option<f64>, Vec<Check>, Value)> {
    let lat = data.lattice;
    let scheme = cfg.scheme;
    let tol = &cfg.tolerances;
    let scale = data.scale();
    let level = cfg.penalty_level.unwrap_or(DEFAULT_PENALTY_LEVEL);
    let mut checks = Vec::new();
    let result = match cfg.kind {
        Kind::Bsde => {
            let sol = solve_bsde(&lat, data.xi(), &data.g, scheme)?;
            out.csv("solution.csv", |w| sol.write_csv(w))?;
            let (ry, rz) = backward_residual(&sol, &data.g, scheme)?;
            checks.push(Check::at_most("backward_residual", ry, tol.exact * scale));
            checks.push(Check::at_most("z_residual", rz, tol.exact * scale / lat.sqrt_dt()));
            (Some(sol.y0()), json!({ "scale": scale, "meta": sol.meta() }))
        }
        Kind::Rbsde => {
            let side = cfg.one_obstacle_side()?;
            let sol = solve_rbsde(&lat, data.xi(), &data.g, data.obstacle(side), side, scheme)?;
            out.csv("solution.csv", |w| sol.write_csv(w))?;
            solution_checks(&sol, &mut checks);
            let mode = cfg.snell.unwrap_or(SnellMode::Backward);
            let snell = verify_snell(&lat, &sol, data.xi(), &data.g, mode, scheme, tol.game)?;
            checks.push(Check::holds("snell_envelope", snell.pass));
            (Some(sol.y0()), json!({ "scale": scale, "snell": snell, "meta": sol.meta() }))
        }
        Kind::Drbsde => {
            let game = data.game()?;
            let sol = solve_drbsde(&lat, &game, scheme)?;
            out.csv("solution.csv", |w| sol.write_csv(w))?;
            solution_checks(&sol, &mut checks);
            let squeeze = penalization_squeeze(&lat, &game, level, scheme)?;
            checks.push(Check::at_most("squeeze_violations", squeeze.violations as f64, 0.0));
            let details = json!({
                "scale": game.scale(),
                "separation_margin": game.separation_margin(),
                "squeeze": squeeze,
                "meta": sol.meta(),
            });
            (Some(sol.y0()), details)
        }
        Kind::DynkinVerify => {
            if !lat.is_full_tree() {
                bail!("dynkin-verify needs mode 'full-tree'");
            }
            let game = data.game()?;
            let sol = solve_drbsde(&lat, &game, scheme)?;
            out.csv("solution.csv", |w| sol.write_csv(w))?;
            let saddle = verify_saddle(&lat, &game, &sol, scheme, tol.game)?;
            checks.push(Check::holds("saddle_point", saddle.pass));
            let oracle = if enumerate_stopping_rules(&lat).is_ok() {
                let (rep, pairs) = game_value_oracle(&lat, &game, scheme, tol.game)?;
                out.csv("pairs.csv", |w| pairs.write_csv(w))?;
                checks.push(Check::holds("sup_inf_equals_inf_sup_equals_y0", rep.pass));
                Some(rep)
            } else {
                None
            };
            (Some(sol.y0()), json!({ "saddle": saddle, "oracle": oracle }))
        }
        Kind::Penalization => {
            let schedule = cfg.schedule.as_deref().expect("validated");
            let (last, details) = if data.lower.is_some() && data.upper.is_some() {
                let game = data.game()?;
                let direction = cfg.direction.unwrap_or(Direction::Increasing);
                let (sols, rep) = double_penalization(&lat, &game, schedule, direction, scheme)?;
                out.csv("penalization.csv", |w| rep.write_csv(w))?;
                checks.push(Check::at_most("monotonicity_violations", rep.total_violations() as f64, 0.0));
                checks.push(Check::at_most("squeeze_violations", rep.squeeze_violations as f64, 0.0));
                checks.push(Check::at_most("final_gap", rep.final_gap, tol.penalty_relative * rep.scale));
                (sols.into_iter().last(), to_value(&rep))
            } else {
                let side = cfg.one_obstacle_side()?;
                let (sols, rep) =
                    penalization_run(&lat, data.xi(), &data.g, data.obstacle(side), side, schedule, scheme)?;
                out.csv("penalization.csv", |w| rep.write_csv(w))?;
                checks.push(Check::at_most("monotonicity_violations", rep.total_violations() as f64, 0.0));
                if rep.levels.iter().all(|l| l.envelope.is_some()) {
                    checks.push(Check::holds("within_envelope", rep.within_envelope()));
                }
                checks.push(Check::at_most("final_gap", rep.final_gap, tol.penalty_relative * rep.scale));
                (sols.into_iter().last(), to_value(&rep))
            };
            let last = last.expect("schedule is nonempty");
            out.csv("solution.csv", |w| last.write_csv(w))?;
            (Some(last.y0()), details)
        }
        Kind::Pasting => {
            let game = data.game()?;
            let direct = solve_drbsde(&lat, &game, scheme)?;
            let (pasted, ledger) = pasting_construct(&lat, &game, scheme)?;
            out.csv("solution.csv", |w| pasted.write_csv(w))?;
            out.csv("pasting_ledger.csv", |w| ledger.write_csv(w))?;
            checks.push(Check::at_most("route_gap", pasted.y().max_abs_diff(direct.y()), tol.game * game.scale()));
            checks.push(Check::at_most("ledger_depth", ledger.max_depth() as f64, (lat.steps() + 1) as f64));
            let routes = cross_validate(&lat, &game, scheme, level)?;
            (Some(pasted.y0()), json!({ "direct_y0": direct.y0(), "cross_validation": routes }))
        }
        Kind::Axioms => {
            let cases = sample_axiom_cases(&lat, cfg.samples.unwrap_or(DEFAULT_AXIOM_SAMPLES), cfg.seed)?;
            let rep = verify_evaluation_axioms(&lat, &data.g, &cases, scheme, tol.axiom)?;
            out.csv("axioms.csv", |w| {
                let mut w = csv::Writer::from_writer(w);
                w.write_record(["axiom", "checked", "skipped", "max_violation", "pass"])?;
                for r in &rep.results {
                    let name = to_value(&r.axiom).as_str().unwrap_or_default().to_string();
                    w.write_record([
                        name,
                        r.checked.to_string(),
                        r.skipped.to_string(),
                        fmt_f64(r.max_violation),
                        r.pass.to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
            for r in &rep.results {
                let name = to_value(&r.axiom).as_str().unwrap_or_default().replace('-', "_");
                checks.push(Check::at_most(&name, r.max_violation, tol.axiom));
                checks.last_mut().expect("just pushed").pass = r.pass;
            }
            (None, to_value(&rep))
        }
        Kind::Hypotheses => {
            let sampling = cfg
                .sampling
                .unwrap_or_else(|| SamplingBox::symmetric(lat.horizon(), DEFAULT_SAMPLING_RADIUS));
            let samples = cfg.samples.unwrap_or(DEFAULT_HYPOTHESIS_SAMPLES);
            let rep = check_hypotheses(&data.g, samples, &sampling, cfg.seed)?;
            out.csv("hypotheses.csv", |w| {
                let mut w = csv::Writer::from_writer(w);
                w.write_record(["hypothesis", "verdict", "worst_ratio", "worst_excess", "violations"])?;
                for e in &rep.entries {
                    w.write_record([
                        format!("{:?}", e.hypothesis),
                        to_value(&e.verdict).as_str().unwrap_or_default().to_string(),
                        e.worst_ratio.map(fmt_f64).unwrap_or_default(),
                        fmt_f64(e.worst_excess),
                        e.violations.to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
            for e in &rep.entries {
                checks.push(Check::at_most(&format!("{:?}", e.hypothesis), e.violations as f64, 0.0));
            }
            (None, to_value(&rep))
        }
        Kind::McCrosscheck => {
            let spec = cfg.mc.as_ref().expect("validated");
            let reference = match (&data.lower, &data.upper) {
                (None, None) => solve_bsde(&lat, data.xi(), &data.g, scheme)?,
                (Some(l), None) => solve_rbsde(&lat, data.xi(), &data.g, l, Side::Lower, scheme)?,
                (None, Some(u)) => solve_rbsde(&lat, data.xi(), &data.g, u, Side::Upper, scheme)?,
                (Some(_), Some(_)) => solve_drbsde(&lat, &data.game()?, scheme)?,
            };
            out.csv("solution.csv", |w| reference.write_csv(w))?;
            let steps = spec.steps.unwrap_or(lat.steps());
            let bundle = simulate_paths(1, lat.horizon(), steps, spec.paths, cfg.seed)?;
            let term = parse(&cfg.terminal).expect("validated");
            let mut problem = McProblem::plain(move |t, x| term.eval(t, x[0]));
            if let Some(l) = parse(&cfg.lower) {
                problem = problem.with_lower(move |t, x| l.eval(t, x[0]));
            }
            if let Some(u) = parse(&cfg.upper) {
                problem = problem.with_upper(move |t, x| u.eval(t, x[0]));
            }
            let options = McOptions {
                basis: spec.basis,
                scheme,
                penalty: spec.penalty,
                bootstrap: spec.bootstrap,
            };
            let mc = solve_mc(&bundle, &problem, &data.g, options)?;
            out.csv("mc_steps.csv", |w| mc.write_csv(w))?;
            let gap = (mc.y0 - reference.y0()).abs();
            let limit = tol.mc_se_multiple * mc.standard_error + tol.mc_scale_slack * scale;
            checks.push(Check::at_most("lattice_gap", gap, limit));
            checks.push(Check::at_most("obstacle_violations", mc.obstacle_violations as f64, 0.0));
            checks.push(Check::holds("path_sanity", mc.sanity.pass));
            let details = json!({
                "lattice_y0": reference.y0(),
                "mc_y0": mc.y0,
                "standard_error": mc.standard_error,
                "scale": scale,
                "mc": {
                    "z0": mc.z0,
                    "paths": mc.paths,
                    "steps": mc.steps,
                    "max_condition": mc.max_condition,
                    "warnings": mc.warnings,
                    "flat_off_lower": mc.flat_off_lower,
                    "flat_off_upper": mc.flat_off_upper,
                    "sanity": mc.sanity,
                },
            });
            (Some(mc.y0), details)
        }
    };
    Ok((result.0, checks, result.1))
}

/// Runs one experiment into `out_dir`. Errors are configuration or
/// size-guard failures; a failed verification is reported in the outcome.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: Option<&Path>, out_dir: &Path, jobs: usize) -> Result<Outcome> {
    let start = Instant::now();
    cfg.validate()?;
    let data = Data::build(cfg, base_dir)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let mut effective = cfg.clone();
    effective.out = None;
    let config_json = effective.to_json();
    out.put("config.json", config_json.as_bytes())?;
    let (y0, checks, details) = solve(cfg, &data, &mut out)?;
    let pass = checks.iter().all(|c| c.pass);
    let report = Report {
        kind: cfg.kind,
        pass,
        y0,
        checks,
        details,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    out.put("report.json", text.as_bytes())?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        core_version: drbsde_core::VERSION,
        kind: cfg.kind,
        config_sha256: hex(&Sha256::digest(config_json.as_bytes())),
        seed: cfg.seed,
        jobs,
        pass,
        files: &out.files,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(out_dir.join("manifest.json"), text)?;
    Ok(Outcome {
        kind: cfg.kind,
        pass,
        y0,
        out_dir: out_dir.to_path_buf(),
        failed: report.checks.into_iter().filter(|c| !c.pass).collect(),
    })
}
