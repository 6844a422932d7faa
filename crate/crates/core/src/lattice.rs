//! Discrete Brownian models.
//!
//! A [`Lattice`] is the symmetric random walk `B_{k+1} = B_k ± sqrt(dt)` with
//! probability 1/2 on each branch, stored either as a recombining binomial
//! lattice or as the full binary tree of paths. Nodes are numbered level by
//! level, so the nodes of step `k` occupy the contiguous range
//! [`Lattice::nodes_at`]. Within a level:
//!
//! * recombining: local index `j` is the number of up moves, state `(2j-k)·sqrt(dt)`;
//! * full tree: local index `p` is the bit path (first move in the most
//!   significant bit, `1` = up), so the children of `p` are `2p` and `2p+1`.
//!
//! Conditional expectations on either backend are exact averages over the two
//! children.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64};

/// Largest tree depth accepted in full-tree mode (2^25 - 1 nodes).
pub const MAX_TREE_STEPS: usize = 24;
/// Largest step count accepted in recombining mode.
pub const MAX_RECOMBINING_STEPS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Recombining,
    FullTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    horizon: f64,
    steps: usize,
    mode: Mode,
}

impl Lattice {
    pub fn new(horizon: f64, steps: usize, mode: Mode) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        match mode {
            Mode::FullTree if steps > MAX_TREE_STEPS => Err(Error::SizeGuard(format!(
                "full tree with {steps} steps exceeds the {MAX_TREE_STEPS}-step limit"
            ))),
            Mode::Recombining if steps > MAX_RECOMBINING_STEPS => Err(Error::SizeGuard(format!(
                "recombining lattice with {steps} steps exceeds the {MAX_RECOMBINING_STEPS}-step limit"
            ))),
            _ => Ok(Self {
                horizon,
                steps,
                mode,
            }),
        }
    }

    pub fn recombining(horizon: f64, steps: usize) -> Result<Self> {
        Self::new(horizon, steps, Mode::Recombining)
    }

    pub fn full_tree(horizon: f64, steps: usize) -> Result<Self> {
        Self::new(horizon, steps, Mode::FullTree)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_full_tree(&self) -> bool {
        self.mode == Mode::FullTree
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt().sqrt()
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Number of nodes at step `k`.
    pub fn width(&self, k: usize) -> usize {
        match self.mode {
            Mode::Recombining => k + 1,
            Mode::FullTree => 1usize << k,
        }
    }

    pub fn offset(&self, k: usize) -> usize {
        match self.mode {
            Mode::Recombining => k * (k + 1) / 2,
            Mode::FullTree => (1usize << k) - 1,
        }
    }

    pub fn nodes_at(&self, k: usize) -> Range<usize> {
        let start = self.offset(k);
        start..start + self.width(k)
    }

    pub fn node_count(&self) -> usize {
        self.offset(self.steps + 1)
    }

    pub fn terminal_nodes(&self) -> Range<usize> {
        self.nodes_at(self.steps)
    }

    pub fn step_of(&self, node: usize) -> usize {
        match self.mode {
            Mode::FullTree => (node + 1).ilog2() as usize,
            Mode::Recombining => {
                let mut k = (((8 * node + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
                while self.offset(k + 1) <= node {
                    k += 1;
                }
                while self.offset(k) > node {
                    k -= 1;
                }
                k
            }
        }
    }

    pub fn local_index(&self, node: usize) -> usize {
        node - self.offset(self.step_of(node))
    }

    /// Number of up moves leading to `node`.
    pub fn up_count(&self, node: usize) -> usize {
        let i = self.local_index(node);
        match self.mode {
            Mode::Recombining => i,
            Mode::FullTree => i.count_ones() as usize,
        }
    }

    pub fn state(&self, node: usize) -> f64 {
        let k = self.step_of(node);
        let j = self.up_count(node);
        (2 * j as i64 - k as i64) as f64 * self.sqrt_dt()
    }

    /// `(down, up)` children of a non-terminal node.
    pub fn children(&self, node: usize) -> (usize, usize) {
        let k = self.step_of(node);
        debug_assert!(k < self.steps, "terminal node has no children");
        let (d, u) = self.local_children(self.local_index(node));
        let next = self.offset(k + 1);
        (next + d, next + u)
    }

    /// `(down, up)` local indices at step `k+1` of local node `i` at step `k`.
    pub fn local_children(&self, i: usize) -> (usize, usize) {
        match self.mode {
            Mode::Recombining => (i, i + 1),
            Mode::FullTree => (2 * i, 2 * i + 1),
        }
    }

    /// Parent on the full tree; `None` at the root or on a recombining lattice.
    pub fn parent(&self, node: usize) -> Option<usize> {
        if node == 0 || self.mode != Mode::FullTree {
            return None;
        }
        let k = self.step_of(node);
        Some(self.offset(k - 1) + self.local_index(node) / 2)
    }

    /// All parents of a node (one on the full tree, up to two when recombining).
    pub fn parents(&self, node: usize) -> Vec<usize> {
        let k = self.step_of(node);
        if k == 0 {
            return Vec::new();
        }
        let i = self.local_index(node);
        match self.mode {
            Mode::FullTree => vec![self.offset(k - 1) + i / 2],
            Mode::Recombining => {
                let prev = self.offset(k - 1);
                let mut out = Vec::with_capacity(2);
                if i < k {
                    out.push(prev + i);
                }
                if i > 0 {
                    out.push(prev + i - 1);
                }
                out
            }
        }
    }

    /// Stable node identifier used in serialized output: the up count on a
    /// recombining lattice, `b` followed by the bit path on the full tree.
    pub fn node_label(&self, node: usize) -> String {
        let k = self.step_of(node);
        let i = self.local_index(node);
        match self.mode {
            Mode::Recombining => i.to_string(),
            Mode::FullTree if k == 0 => "b".to_string(),
            Mode::FullTree => format!("b{:0width$b}", i, width = k),
        }
    }

    pub fn parse_node_label(&self, k: usize, label: &str) -> Result<usize> {
        let bad = || Error::Parse(format!("bad node label {label:?} at step {k}"));
        let i = match self.mode {
            Mode::Recombining => label.parse::<usize>().map_err(|_| bad())?,
            Mode::FullTree => {
                let bits = label.strip_prefix('b').ok_or_else(bad)?;
                if bits.len() != k {
                    return Err(bad());
                }
                if k == 0 {
                    0
                } else {
                    usize::from_str_radix(bits, 2).map_err(|_| bad())?
                }
            }
        };
        if i >= self.width(k) {
            return Err(bad());
        }
        Ok(self.offset(k) + i)
    }

    /// Number of Brownian paths through `node` out of the `2^k` paths of length `k`.
    pub fn multiplicity(&self, node: usize) -> f64 {
        match self.mode {
            Mode::FullTree => 1.0,
            Mode::Recombining => binomial(self.step_of(node), self.local_index(node)),
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps {
            return Err(Error::StepOutOfRange {
                step: k,
                steps: self.steps,
            });
        }
        Ok(())
    }

    /// Writes the node table `(k, node, state, value)` with `value = t_k`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "node", "state", "value"])?;
        for k in 0..=self.steps {
            for node in self.nodes_at(k) {
                w.write_record([
                    k.to_string(),
                    self.node_label(node),
                    fmt_f64(self.state(node)),
                    fmt_f64(self.time(k)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// Averages each pair of children: `next` holds the values at step `k+1`.
pub fn conditional_expectation(lattice: &Lattice, k: usize, next: &[f64]) -> Result<Vec<f64>> {
    lattice.check_step(k)?;
    check_len(lattice.width(k + 1), next.len())?;
    Ok((0..lattice.width(k))
        .map(|i| {
            let (d, u) = lattice.local_children(i);
            0.5 * (next[u] + next[d])
        })
        .collect())
}

/// Discrete martingale-representation integrand `(Y_up - Y_down) / (2 sqrt(dt))`.
pub fn martingale_increment(lattice: &Lattice, k: usize, next: &[f64]) -> Result<Vec<f64>> {
    lattice.check_step(k)?;
    check_len(lattice.width(k + 1), next.len())?;
    let denom = 2.0 * lattice.sqrt_dt();
    Ok((0..lattice.width(k))
        .map(|i| {
            let (d, u) = lattice.local_children(i);
            (next[u] - next[d]) / denom
        })
        .collect())
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// One value per lattice node.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProcess {
    lattice: Lattice,
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        check_len(lattice.node_count(), values.len())?;
        if let Some(node) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                node,
                what: "process value is NaN".into(),
            });
        }
        Ok(Self { lattice, values })
    }

    pub(crate) fn from_vec_unchecked(lattice: Lattice, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), lattice.node_count());
        Self { lattice, values }
    }

    pub fn from_fn(lattice: Lattice, f: impl Fn(usize) -> f64) -> Self {
        let values = (0..lattice.node_count()).map(f).collect();
        Self { lattice, values }
    }

    /// Evaluates `f(t, state)` at every node.
    pub fn from_state_fn(lattice: Lattice, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(lattice.node_count());
        for k in 0..=lattice.steps() {
            let t = lattice.time(k);
            for node in lattice.nodes_at(k) {
                values.push(f(t, lattice.state(node)));
            }
        }
        Self { lattice, values }
    }

    pub fn constant(lattice: Lattice, c: f64) -> Self {
        Self {
            lattice,
            values: vec![c; lattice.node_count()],
        }
    }

    /// Brownian motion itself, `B_k` at every node.
    pub fn brownian(lattice: Lattice) -> Self {
        Self::from_fn(lattice, |n| lattice.state(n))
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn at_step(&self, k: usize) -> &[f64] {
        &self.values[self.lattice.nodes_at(k)]
    }

    pub fn root(&self) -> f64 {
        self.values[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            lattice: self.lattice,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_lattice(other)?;
        Ok(Self {
            lattice: self.lattice,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_lattice(&self, other: &Self) -> Result<()> {
        if self.lattice != other.lattice {
            return Err(Error::LatticeMismatch);
        }
        Ok(())
    }

    pub fn check_on(&self, lattice: &Lattice) -> Result<()> {
        if &self.lattice != lattice {
            return Err(Error::LatticeMismatch);
        }
        Ok(())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn terminal(&self) -> TerminalPayoff {
        TerminalPayoff {
            lattice: self.lattice,
            values: self.at_step(self.lattice.steps()).to_vec(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "node", "state", "value"])?;
        let lat = &self.lattice;
        for k in 0..=lat.steps() {
            for node in lat.nodes_at(k) {
                w.write_record([
                    k.to_string(),
                    lat.node_label(node),
                    fmt_f64(lat.state(node)),
                    fmt_f64(self.values[node]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump produced by [`AdaptedProcess::write_csv`] back onto `lattice`.
    pub fn read_csv<R: Read>(lattice: Lattice, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["k", "node", "state", "value"] {
            return Err(Error::Parse(format!("unexpected header {headers:?}")));
        }
        let mut values = vec![f64::NAN; lattice.node_count()];
        for rec in r.records() {
            let rec = rec?;
            let k: usize = rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad step {:?}", &rec[0])))?;
            if k > lattice.steps() {
                return Err(Error::StepOutOfRange {
                    step: k,
                    steps: lattice.steps(),
                });
            }
            let node = lattice.parse_node_label(k, &rec[1])?;
            values[node] = parse_f64(&rec[3])?;
        }
        Self::new(lattice, values)
    }
}

/// Terminal datum: one value per node at step `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalPayoff {
    lattice: Lattice,
    values: Vec<f64>,
}

impl TerminalPayoff {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        check_len(lattice.width(lattice.steps()), values.len())?;
        let first = lattice.offset(lattice.steps());
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: first + i,
                what: "terminal payoff".into(),
            });
        }
        Ok(Self { lattice, values })
    }

    pub fn from_state_fn(lattice: Lattice, f: impl Fn(f64) -> f64) -> Self {
        let values = lattice.terminal_nodes().map(|n| f(lattice.state(n))).collect();
        Self { lattice, values }
    }

    pub fn constant(lattice: Lattice, c: f64) -> Self {
        Self {
            lattice,
            values: vec![c; lattice.width(lattice.steps())],
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at_node(&self, node: usize) -> f64 {
        self.values[node - self.lattice.offset(self.lattice.steps())]
    }

    pub fn neg(&self) -> Self {
        Self {
            lattice: self.lattice,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    pub fn check_on(&self, lattice: &Lattice) -> Result<()> {
        if &self.lattice != lattice {
            return Err(Error::LatticeMismatch);
        }
        Ok(())
    }

    /// Path-weighted mean, i.e. `E[xi]`, by repeated averaging.
    pub fn mean(&self) -> f64 {
        let lat = &self.lattice;
        let mut cur = self.values.clone();
        for k in (0..lat.steps()).rev() {
            cur = conditional_expectation(lat, k, &cur).expect("widths match by construction");
        }
        cur[0]
    }

    /// Embeds the payoff into a process that is zero before the horizon.
    pub fn to_process(&self) -> AdaptedProcess {
        let mut values = vec![0.0; self.lattice.node_count()];
        values[self.lattice.terminal_nodes()].copy_from_slice(&self.values);
        AdaptedProcess::from_vec_unchecked(self.lattice, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_recombining_has_three_nodes() {
        let lat = Lattice::recombining(1.0, 1).unwrap();
        assert_eq!(lat.node_count(), 3);
        let states: Vec<f64> = (0..3).map(|n| lat.state(n)).collect();
        assert_eq!(states, vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn full_tree_of_depth_four_has_31_nodes() {
        let lat = Lattice::full_tree(1.0, 4).unwrap();
        assert_eq!(lat.node_count(), 31);
        assert_eq!(lat.terminal_nodes().len(), 16);
    }

    #[test]
    fn root_children_at_half_for_dt_quarter() {
        let lat = Lattice::recombining(2.0, 8).unwrap();
        assert_eq!(lat.dt(), 0.25);
        let (d, u) = lat.children(0);
        assert_eq!(lat.state(d), -0.5);
        assert_eq!(lat.state(u), 0.5);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            Lattice::recombining(0.0, 3),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Lattice::recombining(1.0, 0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            Lattice::full_tree(1.0, 25),
            Err(Error::SizeGuard(_))
        ));
        assert!(Lattice::full_tree(1.0, 24).is_ok());
    }

    #[test]
    fn step_of_inverts_offsets() {
        for mode in [Mode::Recombining, Mode::FullTree] {
            let lat = Lattice::new(1.0, 9, mode).unwrap();
            for k in 0..=9 {
                for node in lat.nodes_at(k) {
                    assert_eq!(lat.step_of(node), k);
                }
            }
        }
    }

    #[test]
    fn parent_child_links_agree() {
        let lat = Lattice::full_tree(1.0, 5).unwrap();
        for node in 0..lat.nodes_at(4).end {
            let (d, u) = lat.children(node);
            assert_eq!(lat.parent(d), Some(node));
            assert_eq!(lat.parent(u), Some(node));
            assert!((lat.state(u) - lat.state(node) - lat.sqrt_dt()).abs() < 1e-15);
        }
        let rec = Lattice::recombining(1.0, 5).unwrap();
        for node in 0..rec.nodes_at(4).end {
            let (d, u) = rec.children(node);
            assert!(rec.parents(d).contains(&node));
            assert!(rec.parents(u).contains(&node));
        }
    }

    #[test]
    fn node_labels_round_trip() {
        for mode in [Mode::Recombining, Mode::FullTree] {
            let lat = Lattice::new(1.0, 4, mode).unwrap();
            for node in 0..lat.node_count() {
                let k = lat.step_of(node);
                assert_eq!(lat.parse_node_label(k, &lat.node_label(node)).unwrap(), node);
            }
        }
        let lat = Lattice::full_tree(1.0, 3).unwrap();
        assert_eq!(lat.node_label(0), "b");
        assert_eq!(lat.node_label(lat.offset(3) + 0b101), "b101");
    }

    #[test]
    fn conditional_expectation_of_constant_is_constant() {
        let lat = Lattice::recombining(1.0, 4).unwrap();
        let out = conditional_expectation(&lat, 2, &[3.5; 4]).unwrap();
        assert_eq!(out, vec![3.5; 3]);
    }

    #[test]
    fn brownian_is_a_martingale_with_unit_integrand() {
        for mode in [Mode::Recombining, Mode::FullTree] {
            let lat = Lattice::new(1.0, 4, mode).unwrap();
            let b = AdaptedProcess::brownian(lat);
            for k in 0..4 {
                let e = conditional_expectation(&lat, k, b.at_step(k + 1)).unwrap();
                let z = martingale_increment(&lat, k, b.at_step(k + 1)).unwrap();
                for (i, node) in lat.nodes_at(k).enumerate() {
                    assert!((e[i] - lat.state(node)).abs() < 1e-15);
                    assert!((z[i] - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn squared_brownian_gains_dt_and_has_integrand_two_b() {
        // ((b+s)^2 + (b-s)^2)/2 = b^2 + s^2 and ((b+s)^2 - (b-s)^2)/(2s) = 2b
        let lat = Lattice::recombining(1.0, 8).unwrap();
        let sq = AdaptedProcess::from_fn(lat, |n| lat.state(n).powi(2));
        for k in 0..8 {
            let e = conditional_expectation(&lat, k, sq.at_step(k + 1)).unwrap();
            let z = martingale_increment(&lat, k, sq.at_step(k + 1)).unwrap();
            for (i, node) in lat.nodes_at(k).enumerate() {
                let b = lat.state(node);
                assert!((e[i] - (b * b + lat.dt())).abs() < 1e-13);
                assert!((z[i] - 2.0 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn operators_reject_bad_shapes() {
        let lat = Lattice::recombining(1.0, 3).unwrap();
        assert!(matches!(
            conditional_expectation(&lat, 3, &[0.0; 5]),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            martingale_increment(&lat, 1, &[0.0; 2]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn terminal_mean_weights_paths() {
        let lat = Lattice::recombining(1.0, 6).unwrap();
        let sq = TerminalPayoff::from_state_fn(lat, |x| x * x);
        assert!((sq.mean() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn csv_dump_has_header_and_full_precision() {
        let lat = Lattice::recombining(1.0, 2).unwrap();
        let p = AdaptedProcess::from_fn(lat, |n| 0.1 * n as f64);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,node,state,value"));
        assert_eq!(lines.next(), Some("0,0,0.0000000000000000e0,0.0000000000000000e0"));
        let back = AdaptedProcess::read_csv(lat, text.as_bytes()).unwrap();
        assert_eq!(back, p);
    }
}
