//! Finite control sets, adapted piecewise-constant strategies, controlled
//! states `X_t = int_0^t sigma_s dW_s`, and strategy concatenation.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, PathTree};
use crate::scalar::Real;

/// Default cap on the number of strategies an enumeration may produce.
pub const DEFAULT_STRATEGY_BUDGET: usize = 1 << 16;

/// Nonempty finite set of `d x m` control matrices (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet<S> {
    d: usize,
    m: usize,
    elements: Vec<Vec<S>>,
}

impl<S: Real> ControlSet<S> {
    pub fn new(d: usize, m: usize, elements: Vec<Vec<S>>) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::config("controls", "matrix dimensions must be positive"));
        }
        if elements.is_empty() {
            return Err(Error::config("controls", "control set must be nonempty"));
        }
        for (i, e) in elements.iter().enumerate() {
            if e.len() != d * m {
                return Err(Error::config(
                    format!("controls[{i}]"),
                    format!("expected {d}x{m} = {} entries, got {}", d * m, e.len()),
                ));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("controls[{i}]"), "entries must be finite"));
            }
        }
        Ok(Self { d, m, elements })
    }

    /// Scalar controls for `d = m = 1`.
    pub fn scalars(values: &[S]) -> Result<Self> {
        Self::new(1, 1, values.iter().map(|v| vec![*v]).collect())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, index: usize) -> &[S] {
        &self.elements[index]
    }

    pub fn elements(&self) -> &[Vec<S>] {
        &self.elements
    }

    /// `B = max |sigma|` (Frobenius).
    pub fn bound(&self) -> S {
        self.elements
            .iter()
            .map(|e| e.iter().map(|v| *v * *v).sum::<S>().sqrt())
            .fold(S::zero(), S::max)
    }

    /// `out += sigma_index * dw`.
    pub fn apply(&self, index: usize, dw: &[S], out: &mut [S]) {
        let e = &self.elements[index];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &e[r * self.m..(r + 1) * self.m];
            *o = *o + row.iter().zip(dw).map(|(a, b)| *a * *b).sum::<S>();
        }
    }

    /// The singleton set holding only element `index`.
    pub fn restrict(&self, index: usize) -> Self {
        Self {
            d: self.d,
            m: self.m,
            elements: vec![self.elements[index].clone()],
        }
    }
}

/// Control indices for every non-terminal node: `levels[k][i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OpenLoop {
    levels: Vec<Vec<u32>>,
}

impl OpenLoop {
    pub fn new(levels: Vec<Vec<u32>>) -> Self {
        Self { levels }
    }

    pub fn constant<S: Real>(tree: &PathTree<S>, index: usize) -> Self {
        Self::new((0..tree.steps()).map(|k| vec![index as u32; tree.level_len(k)]).collect())
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize) -> usize {
        self.levels[k][i] as usize
    }

    pub fn levels(&self) -> &[Vec<u32>] {
        &self.levels
    }

    fn validate<S: Real>(&self, tree: &PathTree<S>, controls: usize) -> Result<()> {
        if self.levels.len() != tree.steps() {
            return Err(Error::Strategy(format!(
                "open-loop table covers {} levels, the tree has {} decision levels",
                self.levels.len(),
                tree.steps()
            )));
        }
        for (k, l) in self.levels.iter().enumerate() {
            if l.len() != tree.level_len(k) {
                return Err(Error::Strategy(format!(
                    "missing table entries at level {k}: {} of {}",
                    l.len(),
                    tree.level_len(k)
                )));
            }
            if let Some(i) = l.iter().position(|v| *v as usize >= controls) {
                return Err(Error::Strategy(format!(
                    "control index {} at node ({k}, {i}) outside a set of {controls}",
                    l[i]
                )));
            }
        }
        Ok(())
    }
}

/// Feedback rule `(k, state) -> control index`.
pub type FeedbackRule<S> = Arc<dyn Fn(usize, &[S]) -> usize + Send + Sync>;

/// Adapted `U`-valued control process, constant on each `[t_k, t_{k+1})`.
#[derive(Clone)]
pub enum Strategy<S> {
    Constant(usize),
    OpenLoop(OpenLoop),
    /// Evaluated at `(k, base + X_k)`.
    Feedback(FeedbackRule<S>),
}

impl<S> fmt::Debug for Strategy<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Constant(i) => write!(f, "Constant({i})"),
            Strategy::OpenLoop(t) => write!(f, "OpenLoop({} levels)", t.levels.len()),
            Strategy::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

impl<S: Real> Strategy<S> {
    /// Resolves the strategy into a per-node table for one base point.
    pub fn resolve(
        &self,
        tree: &PathTree<S>,
        controls: &ControlSet<S>,
        base: Option<&[S]>,
    ) -> Result<OpenLoop> {
        match self {
            Strategy::Constant(i) => {
                if *i >= controls.len() {
                    return Err(Error::Strategy(format!(
                        "constant control index {i} outside a set of {}",
                        controls.len()
                    )));
                }
                Ok(OpenLoop::constant(tree, *i))
            }
            Strategy::OpenLoop(t) => {
                t.validate(tree, controls.len())?;
                Ok(t.clone())
            }
            Strategy::Feedback(rule) => {
                let base = base.ok_or_else(|| {
                    Error::Strategy("feedback strategies need a base point".into())
                })?;
                let d = controls.d();
                if base.len() != d {
                    return Err(Error::Strategy(format!("base point has {} coordinates, expected {d}", base.len())));
                }
                let mut state = vec![base.to_vec()];
                let mut levels = Vec::with_capacity(tree.steps());
                for k in 0..tree.steps() {
                    let mut table = Vec::with_capacity(tree.level_len(k));
                    let mut next = Vec::with_capacity(tree.level_len(k + 1));
                    for (i, y) in state.iter().enumerate() {
                        let u = rule(k, y);
                        if u >= controls.len() {
                            return Err(Error::Strategy(format!(
                                "feedback returned index {u} at node ({k}, {i})"
                            )));
                        }
                        table.push(u as u32);
                        for c in 0..tree.branching() {
                            let mut z = y.clone();
                            controls.apply(u, tree.increment(c), &mut z);
                            next.push(z);
                        }
                    }
                    levels.push(table);
                    state = next;
                }
                Ok(OpenLoop::new(levels))
            }
        }
    }
}

/// `X` at every node: the sum of `sigma(ancestor) * dW(edge)` along the path.
pub fn controlled_state<S: Real>(
    strategy: &Strategy<S>,
    tree: &PathTree<S>,
    controls: &ControlSet<S>,
    base: Option<&[S]>,
) -> Result<AdaptedProcess<S>> {
    let table = strategy.resolve(tree, controls, base)?;
    Ok(state_from_table(&table, tree, controls))
}

pub(crate) fn state_from_table<S: Real>(
    table: &OpenLoop,
    tree: &PathTree<S>,
    controls: &ControlSet<S>,
) -> AdaptedProcess<S> {
    let d = controls.d();
    let mut levels = vec![vec![S::zero(); d]];
    for k in 0..tree.steps() {
        let prev = &levels[k];
        let mut next = Vec::with_capacity(tree.level_len(k + 1) * d);
        for i in 0..tree.level_len(k) {
            let u = table.at(k, i);
            for c in 0..tree.branching() {
                let mut z = prev[i * d..(i + 1) * d].to_vec();
                controls.apply(u, tree.increment(c), &mut z);
                next.extend_from_slice(&z);
            }
        }
        levels.push(next);
    }
    AdaptedProcess::new(d, levels)
}

/// `sigma` on levels with `t_k < t`, `sigma_i` from `t` on.
pub fn concat_strategy<S: Real>(
    sigma: &Strategy<S>,
    sigma_i: &Strategy<S>,
    t: S,
    tree: &PathTree<S>,
    controls: &ControlSet<S>,
    base: Option<&[S]>,
) -> Result<Strategy<S>> {
    let split = tree.grid().index_of(t)?;
    let first = sigma.resolve(tree, controls, base)?;
    let second = sigma_i.resolve(tree, controls, base)?;
    let levels = (0..tree.steps())
        .map(|k| {
            if k < split {
                first.levels[k].clone()
            } else {
                second.levels[k].clone()
            }
        })
        .collect();
    Ok(Strategy::OpenLoop(OpenLoop::new(levels)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Constant,
    OpenLoop,
}

/// Number of non-terminal nodes, i.e. decision points of an open-loop table.
pub fn decision_nodes<S: Real>(tree: &PathTree<S>) -> usize {
    (0..tree.steps()).map(|k| tree.level_len(k)).sum()
}

/// Exhaustive, duplicate-free enumeration of strategies on `tree`.
pub fn enumerate_strategies<S: Real>(
    tree: &PathTree<S>,
    controls: &ControlSet<S>,
    kind: StrategyKind,
    budget: usize,
) -> Result<StrategyIter> {
    let base = controls.len();
    let shape: Vec<usize> = (0..tree.steps()).map(|k| tree.level_len(k)).collect();
    match kind {
        StrategyKind::Constant => Ok(StrategyIter {
            shape,
            digits: Vec::new(),
            base,
            remaining: base,
            constant: Some(0),
        }),
        StrategyKind::OpenLoop => {
            let nodes = decision_nodes(tree);
            let count = (base as u128).checked_pow(nodes as u32);
            let count = match count {
                Some(c) if c <= budget as u128 => c as usize,
                _ => {
                    return Err(Error::Size {
                        what: "open-loop strategy enumeration".into(),
                        count: format!("{base}^{nodes} strategies"),
                        budget,
                    })
                }
            };
            Ok(StrategyIter {
                shape,
                digits: vec![0; nodes],
                base,
                remaining: count,
                constant: None,
            })
        }
    }
}

/// Odometer over control assignments, root digit varying fastest.
#[derive(Debug, Clone)]
pub struct StrategyIter {
    shape: Vec<usize>,
    digits: Vec<u32>,
    base: usize,
    remaining: usize,
    constant: Option<usize>,
}

impl StrategyIter {
    fn table(&self) -> OpenLoop {
        let mut levels = Vec::with_capacity(self.shape.len());
        let mut pos = 0;
        for len in &self.shape {
            levels.push(self.digits[pos..pos + len].to_vec());
            pos += len;
        }
        OpenLoop::new(levels)
    }
}

impl Iterator for StrategyIter {
    type Item = OpenLoop;

    fn next(&mut self) -> Option<OpenLoop> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        if let Some(c) = self.constant.as_mut() {
            let t = OpenLoop::new(self.shape.iter().map(|len| vec![*c as u32; *len]).collect());
            *c += 1;
            return Some(t);
        }
        let out = self.table();
        for d in self.digits.iter_mut() {
            *d += 1;
            if (*d as usize) < self.base {
                break;
            }
            *d = 0;
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for StrategyIter {}
