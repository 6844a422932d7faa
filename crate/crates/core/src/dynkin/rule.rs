//! Stopping rules on a lattice.
//!
//! A rule is stored in closed form: `stopped[node]` says whether the rule has
//! stopped at or before `node`. The closure is "once stopped, stopped" (every
//! child of a stopped node is stopped) and every terminal node is stopped. A
//! path stops at its first stopped node; on the full tree that node is unique
//! per path. On a recombining lattice a rule is a function of the node only,
//! i.e. a Markov rule.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::Lattice;

/// Largest tree depth for which every stopping rule may be enumerated.
pub const MAX_ENUMERATION_STEPS: usize = 4;

#[derive(Clone, Debug)]
pub struct StoppingRule {
    lattice: Lattice,
    stopped: Vec<bool>,
}

impl PartialEq for StoppingRule {
    fn eq(&self, other: &Self) -> bool {
        self.lattice == other.lattice && self.stopped == other.stopped
    }
}

impl StoppingRule {
    /// Builds the canonical rule whose stop set is generated by `flags`.
    pub fn from_flags(lattice: Lattice, flags: &[bool]) -> Result<Self> {
        if flags.len() != lattice.node_count() {
            return Err(Error::ShapeMismatch {
                expected: lattice.node_count(),
                actual: flags.len(),
            });
        }
        Ok(Self::close(lattice, |node| flags[node]))
    }

    fn close(lattice: Lattice, flag: impl Fn(usize) -> bool) -> Self {
        let n = lattice.steps();
        let mut stopped = vec![false; lattice.node_count()];
        for k in 0..=n {
            for node in lattice.nodes_at(k) {
                stopped[node] = k == n
                    || flag(node)
                    || lattice.parents(node).into_iter().any(|p| stopped[p]);
            }
        }
        Self { lattice, stopped }
    }

    /// The rule that never stops before the horizon (`tau = T`).
    pub fn at_horizon(lattice: Lattice) -> Self {
        Self::close(lattice, |_| false)
    }

    /// The rule that stops at the root (`tau = 0`).
    pub fn immediate(lattice: Lattice) -> Self {
        Self::close(lattice, |node| node == 0)
    }

    /// Deterministic time `tau = k`.
    pub fn at_step(lattice: Lattice, k: usize) -> Self {
        Self::close(lattice, |node| lattice.step_of(node) >= k)
    }

    /// First node at or after `start` where `hit` holds, the horizon otherwise.
    pub fn hitting(start: &StoppingRule, hit: impl Fn(usize) -> bool) -> Self {
        Self::close(start.lattice, |node| start.stopped[node] && hit(node))
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn is_stopped(&self, node: usize) -> bool {
        self.stopped[node]
    }

    pub fn flags(&self) -> &[bool] {
        &self.stopped
    }

    /// Whether some path reaching `node` stops exactly there.
    pub fn is_first_stop(&self, node: usize) -> bool {
        self.stopped[node]
            && (node == 0
                || self
                    .lattice
                    .parents(node)
                    .into_iter()
                    .any(|p| !self.stopped[p]))
    }

    pub fn first_stop_nodes(&self) -> Vec<usize> {
        (0..self.stopped.len())
            .filter(|&n| self.is_first_stop(n))
            .collect()
    }

    /// `self ∧ other`: stops as soon as either rule stops.
    pub fn earliest(&self, other: &Self) -> Result<Self> {
        self.same_lattice(other)?;
        Ok(Self {
            lattice: self.lattice,
            stopped: self
                .stopped
                .iter()
                .zip(&other.stopped)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    /// `self ∨ other`: stops once both rules have stopped.
    pub fn latest(&self, other: &Self) -> Result<Self> {
        self.same_lattice(other)?;
        Ok(Self {
            lattice: self.lattice,
            stopped: self
                .stopped
                .iter()
                .zip(&other.stopped)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    /// `self <= other` on every path.
    pub fn precedes(&self, other: &Self) -> bool {
        self.lattice == other.lattice
            && self
                .stopped
                .iter()
                .zip(&other.stopped)
                .all(|(a, b)| !*b || *a)
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

    pub fn canonicalize(&self) -> Self {
        Self::close(self.lattice, |node| self.stopped[node])
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    /// On the full tree: the first-stop node of the path through `node`, if
    /// the rule has stopped by `node`.
    pub fn anchor(&self, node: usize) -> Option<usize> {
        let mut cur = node;
        if !self.stopped[cur] {
            return None;
        }
        while let Some(p) = self.lattice.parent(cur) {
            if !self.stopped[p] {
                break;
            }
            cur = p;
        }
        Some(cur)
    }

    /// First-stop node for every node of a full tree (`None` before stopping).
    pub fn anchors(&self) -> Result<Vec<Option<usize>>> {
        if !self.lattice.is_full_tree() {
            return Err(Error::UnsupportedMode(
                "path anchors need the full tree".into(),
            ));
        }
        let mut out = vec![None; self.stopped.len()];
        for node in 0..self.stopped.len() {
            if self.stopped[node] {
                out[node] = match self.lattice.parent(node) {
                    Some(p) if self.stopped[p] => out[p],
                    _ => Some(node),
                };
            }
        }
        Ok(out)
    }

    /// Short stable digest of the stop set.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.lattice.steps() as u64).to_le_bytes());
        h.update(self.stopped.iter().map(|&b| b as u8).collect::<Vec<u8>>());
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Number of stopping rules on a binary tree of the given depth:
/// `S(0) = 1`, `S(d) = 1 + S(d-1)^2`. `None` on overflow.
pub fn count_stopping_rules(depth: usize) -> Option<u128> {
    let mut s: u128 = 1;
    for _ in 0..depth {
        s = s.checked_mul(s)?.checked_add(1)?;
    }
    Some(s)
}

/// Every canonical stopping rule of a full tree with at most
/// [`MAX_ENUMERATION_STEPS`] steps, each exactly once. At every node the
/// "stop here" rule comes first, followed by the continuation rules ordered
/// by (down subtree, up subtree).
pub fn enumerate_stopping_rules(lattice: &Lattice) -> Result<Vec<StoppingRule>> {
    if !lattice.is_full_tree() {
        return Err(Error::UnsupportedMode(
            "rule enumeration needs the full tree".into(),
        ));
    }
    if lattice.steps() > MAX_ENUMERATION_STEPS {
        return Err(Error::SizeGuard(format!(
            "enumerating rules on {} steps (limit {MAX_ENUMERATION_STEPS})",
            lattice.steps()
        )));
    }
    let stop_sets = stop_sets(lattice, 0);
    Ok(stop_sets
        .into_iter()
        .map(|set| {
            let mut flags = vec![false; lattice.node_count()];
            for n in set {
                flags[n] = true;
            }
            StoppingRule::close(*lattice, |node| flags[node])
        })
        .collect())
}

fn stop_sets(lattice: &Lattice, node: usize) -> Vec<Vec<usize>> {
    if lattice.step_of(node) == lattice.steps() {
        return vec![vec![node]];
    }
    let (d, u) = lattice.children(node);
    let downs = stop_sets(lattice, d);
    let ups = stop_sets(lattice, u);
    let mut out = Vec::with_capacity(1 + downs.len() * ups.len());
    out.push(vec![node]);
    for a in &downs {
        for b in &ups {
            let mut set = a.clone();
            set.extend_from_slice(b);
            out.push(set);
        }
    }
    out
}
