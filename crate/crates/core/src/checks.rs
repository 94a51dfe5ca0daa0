//! Property checks on value fields: supermartingale residuals along
//! controlled paths, two-step dynamic programming, Hölder bounds, path jump
//! moduli and filtration reduction.

use crate::control::{ControlSet, OpenLoop, Strategy};
use crate::error::{Error, Result};
use crate::lattice::PathTree;
use crate::problem::{path_history, CostSpec, ObservedPath};
use crate::scalar::Real;
use crate::value::{Layout, ValueField};

/// Extreme value of a check and where it occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct Extremum<S> {
    pub value: S,
    pub location: String,
}

impl<S: Real> Extremum<S> {
    fn new(value: S) -> Self {
        Self {
            value,
            location: String::from("-"),
        }
    }
}

fn require_tree<S: Real>(value: &ValueField<S>, tree: &PathTree<S>) -> Result<()> {
    if value.layout() != Layout::Tree {
        return Err(Error::Unsupported("this check needs a tree-layout field".into()));
    }
    if value.steps() != tree.steps() || value.m() != tree.dim() {
        return Err(Error::Level("field and tree have different shapes".into()));
    }
    Ok(())
}

/// Minimum over bases, strategies and nodes of
/// `Y_k - E_k[Y_{k+1}] + f(t_k, b + X_k, sigma_k) dt` with `Y = V(., b + X^sigma)`.
pub fn supermartingale_residual<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    value: &ValueField<S>,
    strategies: impl IntoIterator<Item = OpenLoop>,
) -> Result<Extremum<S>> {
    require_tree(value, tree)?;
    let p = tree.transition_probability();
    let dt = tree.dt();
    let mut worst = Extremum::new(S::infinity());
    for (s, table) in strategies.into_iter().enumerate() {
        let idx = value.path_indices(&table)?;
        for b in 0..value.num_bases() {
            for k in 0..tree.steps() {
                for i in 0..tree.level_len(k) {
                    let yk = value.get(b, k, i, idx[k][i]);
                    let mean = (0..tree.branching())
                        .map(|c| {
                            let ch = tree.child(i, c);
                            value.get(b, k + 1, ch, idx[k + 1][ch])
                        })
                        .sum::<S>()
                        * p;
                    let hist = path_history(tree, spec.m0, k, i);
                    let obs = ObservedPath::new(spec.m0, k, &hist);
                    let y = value.point(b, k, idx[k][i]);
                    let u = table.at(k, i);
                    let f = spec.f(tree.grid().time(k), &y, controls.get(u), &obs);
                    let r = yk - mean + f * dt;
                    if r < worst.value {
                        worst = Extremum {
                            value: r,
                            location: format!("strategy {s}, base {b}, node ({k}, {i})"),
                        };
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Largest gap between the stored `V(t_k)` and a direct minimization over
/// every assignment of controls to `(k, node)` and its children, for
/// `k <= N - 2`.
pub fn dpp_two_step_gap<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    value: &ValueField<S>,
) -> Result<Extremum<S>> {
    require_tree(value, tree)?;
    let n = tree.steps();
    let nu = controls.len();
    let br = tree.branching();
    let p = tree.transition_probability();
    let dt = tree.dt();
    let lat = value.lattice();
    let assignments = nu.checked_pow(1 + br as u32).ok_or_else(|| Error::Size {
        what: "two-step assignments".into(),
        count: format!("{nu}^{}", 1 + br),
        budget: usize::MAX,
    })?;
    let mut worst = Extremum::new(S::zero());
    for b in 0..value.num_bases() {
        for k in 0..n.saturating_sub(1) {
            let t0 = tree.grid().time(k);
            let t1 = tree.grid().time(k + 1);
            for i in 0..tree.level_len(k) {
                let h0 = path_history(tree, spec.m0, k, i);
                let o0 = ObservedPath::new(spec.m0, k, &h0);
                let h1: Vec<Vec<S>> =
                    (0..br).map(|c| path_history(tree, spec.m0, k + 1, tree.child(i, c))).collect();
                for w in 0..value.window_len(k) {
                    let y0 = value.point(b, k, w);
                    let mut best = S::infinity();
                    for a in 0..assignments {
                        let u0 = a % nu;
                        let mut total = spec.f(t0, &y0, controls.get(u0), &o0) * dt;
                        let mut rest = a / nu;
                        let mut acc = S::zero();
                        for (c, hist) in h1.iter().enumerate() {
                            let uc = rest % nu;
                            rest /= nu;
                            let ch = tree.child(i, c);
                            let w1 = lat.advance(k, w, u0, c);
                            let y1 = value.point(b, k + 1, w1);
                            let o1 = ObservedPath::new(spec.m0, k + 1, hist);
                            let mut inner = S::zero();
                            for c2 in 0..br {
                                let w2 = lat.advance(k + 1, w1, uc, c2);
                                inner = inner + value.get(b, k + 2, tree.child(ch, c2), w2);
                            }
                            acc = acc + spec.f(t1, &y1, controls.get(uc), &o1) * dt + inner * p;
                        }
                        total = total + acc * p;
                        if total < best {
                            best = total;
                        }
                    }
                    let gap = (best - value.get(b, k, i, w)).abs();
                    if gap > worst.value {
                        worst = Extremum {
                            value: gap,
                            location: format!("base {b}, node ({k}, {i}), window {w}"),
                        };
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolderReport<S> {
    /// Largest `|V(x) - V(y)| - L1 |x - y|^alpha`.
    pub max_excess: Extremum<S>,
    /// Largest `|V(x) - V(y)| / |x - y|^alpha`.
    pub max_ratio: S,
    pub comparisons: usize,
}

/// Compares `V(t_k, node, x)` and `V(t_k, node, y)` for the given base index
/// pairs at every level and node.
pub fn holder_check<S: Real>(
    value: &ValueField<S>,
    pairs: &[(usize, usize)],
    l1: S,
    alpha: S,
) -> HolderReport<S> {
    let mut worst = Extremum::new(S::neg_infinity());
    let mut max_ratio = S::zero();
    let mut comparisons = 0;
    for (pi, (a, b)) in pairs.iter().enumerate() {
        let xa = &value.bases()[*a];
        let xb = &value.bases()[*b];
        let dist = xa.iter().zip(xb).map(|(p, q)| (*p - *q) * (*p - *q)).sum::<S>().sqrt();
        let bound = l1 * dist.powf(alpha);
        for k in 0..=value.steps() {
            for node in 0..value.nodes(k) {
                let diff = (value.at_base(*a, k, node) - value.at_base(*b, k, node)).abs();
                comparisons += 1;
                if dist > S::zero() {
                    max_ratio = max_ratio.max(diff / dist.powf(alpha));
                }
                if diff - bound > worst.value {
                    worst = Extremum {
                        value: diff - bound,
                        location: format!("pair {pi}, level {k}, node {node}"),
                    };
                }
            }
        }
    }
    HolderReport {
        max_excess: worst,
        max_ratio,
        comparisons,
    }
}

/// Largest one-step jump `|V(t_{k+1}, b + X_{k+1}) - V(t_k, b + X_k)|` along
/// the paths of `strategy` from every base point.
///
/// Markov fields accept constant strategies and scan the reachable offsets.
pub fn path_jump<S: Real>(
    value: &ValueField<S>,
    strategy: &Strategy<S>,
    tree: Option<&PathTree<S>>,
    controls: &ControlSet<S>,
) -> Result<S> {
    let mut worst = S::zero();
    match value.layout() {
        Layout::Tree => {
            let tree = tree.ok_or_else(|| Error::Unsupported("tree fields need the tree".into()))?;
            for b in 0..value.num_bases() {
                let table = strategy.resolve(tree, controls, Some(&value.bases()[b]))?;
                let y = value.along(b, &table)?;
                for k in 0..tree.steps() {
                    for (child, v) in y.level(k + 1).iter().enumerate() {
                        worst = worst.max((*v - y.level(k)[tree.parent(child)]).abs());
                    }
                }
            }
        }
        Layout::Markov => {
            let Strategy::Constant(u) = strategy else {
                return Err(Error::Unsupported(
                    "Markov path jumps are computed for constant strategies".into(),
                ));
            };
            let lat = value.lattice();
            let br = 1usize << value.m();
            for b in 0..value.num_bases() {
                let mut reach = vec![false; value.window_len(0)];
                reach[value.center(0)] = true;
                for k in 0..value.steps() {
                    let mut next = vec![false; value.window_len(k + 1)];
                    for (w, on) in reach.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let v0 = value.get(b, k, 0, w);
                        for c in 0..br {
                            let w1 = lat.advance(k, w, *u, c);
                            next[w1] = true;
                            worst = worst.max((value.get(b, k + 1, 0, w1) - v0).abs());
                        }
                    }
                    reach = next;
                }
            }
        }
    }
    Ok(worst)
}

/// Largest difference between field rows of nodes that share the history of
/// the first `m0` Wiener coordinates.
pub fn filtration_spread<S: Real>(value: &ValueField<S>, m0: usize) -> Result<Extremum<S>> {
    if value.layout() != Layout::Tree {
        return Err(Error::Unsupported("filtration checks need a tree-layout field".into()));
    }
    let m = value.m();
    let group: usize = (1usize << m0) - 1;
    let mut worst = Extremum::new(S::zero());
    for b in 0..value.num_bases() {
        for k in 0..=value.steps() {
            let mask: usize = (0..k).map(|s| group << (m * s)).fold(0, |a, v| a | v);
            let wl = value.window_len(k);
            let level = value.level(b, k);
            for i in 0..value.nodes(k) {
                let rep = i & mask;
                for w in 0..wl {
                    let d = (level[i * wl + w] - level[rep * wl + w]).abs();
                    if d > worst.value {
                        worst = Extremum {
                            value: d,
                            location: format!("base {b}, node ({k}, {i}) vs ({k}, {rep})"),
                        };
                    }
                }
            }
        }
    }
    Ok(worst)
}
