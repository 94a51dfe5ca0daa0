//! Discretised probability space: a non-recombining Rademacher path tree for
//! an `m`-dimensional Wiener process, exact conditional expectations on it,
//! and the discrete Doob–Meyer decomposition of adapted processes.
//!
//! Node `(k, i)` lives at time `t_k`; its children are `(k + 1, (i << m) | c)`
//! for `c` in `0..2^m`. Bit `j` of `c` selects the sign of the `j`-th Wiener
//! increment (`1` is `+sqrt(dt)`, `0` is `-sqrt(dt)`). Every child carries the
//! transition probability `2^-m`, so all expectations are finite sums that
//! are evaluated in a fixed order.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default cap on the total number of nodes in a path tree.
pub const DEFAULT_NODE_BUDGET: usize = 1 << 22;

/// Default tolerance for supermartingale checks on exact trees.
pub const DEFAULT_SUPERMARTINGALE_TOL: f64 = 1e-10;

/// Uniform time grid `t_k = k * T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<S> {
    horizon: S,
    steps: usize,
    dt: S,
}

impl<S: Real> TimeGrid<S> {
    pub fn new(horizon: S, steps: usize) -> Result<Self> {
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(Error::config("horizon", format!("must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / S::from_count(steps),
        })
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    /// `t_k`; the last grid time is returned as the horizon itself.
    pub fn time(&self, k: usize) -> S {
        if k >= self.steps {
            self.horizon
        } else {
            S::from_count(k) * self.dt
        }
    }

    /// Index `k` with `t_k = t`, if `t` lies on the grid.
    pub fn index_of(&self, t: S) -> Result<usize> {
        let ratio = t / self.dt;
        let k = ratio.round();
        let slack = S::lit(1e-9) * (S::one() + ratio.abs());
        if t < -slack * self.dt || (ratio - k).abs() > slack || k > S::from_count(self.steps) {
            return Err(Error::OffGrid {
                time: t.as_f64(),
                dt: self.dt.as_f64(),
            });
        }
        Ok(k.to_usize().unwrap_or(0))
    }
}

/// Non-recombining binary-sign path tree.
#[derive(Debug, Clone)]
pub struct PathTree<S> {
    dim: usize,
    grid: TimeGrid<S>,
    sqrt_dt: S,
    /// `increments[c * dim + j]`: the `j`-th component of `Delta W` into child `c`.
    increments: Vec<S>,
    /// `positions[k][i * dim + j]`: `W_j` at node `(k, i)`.
    positions: Vec<Vec<S>>,
}

impl<S: Real> PathTree<S> {
    /// Builds the tree, refusing layouts with more than `budget` nodes.
    pub fn build(dim: usize, grid: TimeGrid<S>, budget: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("m", "Wiener dimension must be at least 1"));
        }
        let steps = grid.steps();
        let total = total_node_count(dim, steps);
        match total {
            Some(n) if n <= budget => {}
            _ => {
                return Err(Error::Size {
                    what: format!("path tree with m = {dim}, N = {steps}"),
                    count: format!("2^{} leaves", dim * steps),
                    budget,
                })
            }
        }
        let sqrt_dt = grid.dt().sqrt();
        let branching = 1usize << dim;
        let mut increments = Vec::with_capacity(branching * dim);
        for c in 0..branching {
            for j in 0..dim {
                increments.push(if (c >> j) & 1 == 1 { sqrt_dt } else { -sqrt_dt });
            }
        }
        let mut positions = Vec::with_capacity(steps + 1);
        positions.push(vec![S::zero(); dim]);
        for k in 0..steps {
            let parent = &positions[k];
            let mut next = Vec::with_capacity(parent.len() * branching);
            for i in 0..(1usize << (dim * k)) {
                for c in 0..branching {
                    for j in 0..dim {
                        next.push(parent[i * dim + j] + increments[c * dim + j]);
                    }
                }
            }
            positions.push(next);
        }
        Ok(Self {
            dim,
            grid,
            sqrt_dt,
            increments,
            positions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dt(&self) -> S {
        self.grid.dt()
    }

    pub fn sqrt_dt(&self) -> S {
        self.sqrt_dt
    }

    pub fn branching(&self) -> usize {
        1 << self.dim
    }

    pub fn level_len(&self, k: usize) -> usize {
        1 << (self.dim * k)
    }

    pub fn total_nodes(&self) -> usize {
        (0..=self.steps()).map(|k| self.level_len(k)).sum()
    }

    /// Probability of a single node at level `k`.
    pub fn node_probability(&self, k: usize) -> S {
        S::one() / S::from_count(self.level_len(k))
    }

    pub fn transition_probability(&self) -> S {
        S::one() / S::from_count(self.branching())
    }

    #[inline]
    pub fn child(&self, index: usize, c: usize) -> usize {
        (index << self.dim) | c
    }

    #[inline]
    pub fn parent(&self, index: usize) -> usize {
        index >> self.dim
    }

    /// Index of the level-`j` ancestor of node `(k, index)`, `j <= k`.
    #[inline]
    pub fn ancestor(&self, k: usize, index: usize, j: usize) -> usize {
        debug_assert!(j <= k);
        index >> (self.dim * (k - j))
    }

    /// Wiener increment leading into child slot `c`.
    #[inline]
    pub fn increment(&self, c: usize) -> &[S] {
        &self.increments[c * self.dim..(c + 1) * self.dim]
    }

    /// Sign (`+1` / `-1`) of component `j` of the increment into child slot `c`.
    #[inline]
    pub fn sign(&self, c: usize, j: usize) -> i64 {
        if (c >> j) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// `W_{t_k}` at node `(k, index)`.
    #[inline]
    pub fn position(&self, k: usize, index: usize) -> &[S] {
        &self.positions[k][index * self.dim..(index + 1) * self.dim]
    }

    pub fn node(&self, level: usize, index: usize) -> NodeRef<'_, S> {
        NodeRef {
            tree: self,
            level,
            index,
        }
    }

    /// Conditional expectation of level-`from` values onto level `to`.
    ///
    /// Computed by iterated one-step averaging, so the tower property holds
    /// with identical arithmetic.
    pub fn conditional_expectation(
        &self,
        values: &[S],
        width: usize,
        from: usize,
        to: usize,
    ) -> Result<Vec<S>> {
        if to > from {
            return Err(Error::Level(format!(
                "cannot condition level-{from} values on the later level {to}"
            )));
        }
        if from > self.steps() {
            return Err(Error::Level(format!("level {from} exceeds the tree depth {}", self.steps())));
        }
        if values.len() != self.level_len(from) * width {
            return Err(Error::Level(format!(
                "expected {} values at level {from}, got {}",
                self.level_len(from) * width,
                values.len()
            )));
        }
        let mut current = values.to_vec();
        for k in (to..from).rev() {
            current = self.step_expectation(&current, width, k);
        }
        Ok(current)
    }

    /// One-step expectation `E_k[Y_{k+1}]` for values given at level `k + 1`.
    pub(crate) fn step_expectation(&self, next: &[S], width: usize, k: usize) -> Vec<S> {
        let branching = self.branching();
        let p = self.transition_probability();
        let mut out = vec![S::zero(); self.level_len(k) * width];
        for (i, slot) in out.chunks_mut(width).enumerate() {
            for c in 0..branching {
                let child = self.child(i, c);
                for (w, v) in slot.iter_mut().zip(&next[child * width..(child + 1) * width]) {
                    *w = *w + *v;
                }
            }
            for w in slot.iter_mut() {
                *w = *w * p;
            }
        }
        out
    }

    /// Mean of scalar values given on one whole level.
    pub fn mean(&self, values: &[S]) -> S {
        let k = (0..=self.steps())
            .find(|k| self.level_len(*k) == values.len())
            .expect("values must cover a whole tree level");
        self.conditional_expectation(values, 1, k, 0)
            .map(|v| v[0])
            .unwrap_or_else(|_| S::zero())
    }

    /// Splits `y` into predictable increasing part and martingale part:
    /// `Y_k = Y_{k+1} + dK_k - M_{k+1}`.
    pub fn doob_meyer_decompose(
        &self,
        y: &AdaptedProcess<S>,
        tolerance: S,
    ) -> Result<PotentialDecomposition<S>> {
        self.check_scalar_process(y)?;
        let depth = y.depth();
        let mut increments = Vec::with_capacity(depth);
        let mut martingale = Vec::with_capacity(depth + 1);
        martingale.push(vec![S::zero()]);
        let mut worst = (S::infinity(), 0usize, 0usize);
        for k in 0..depth {
            let next = &y.levels[k + 1];
            let cond = self.step_expectation(next, 1, k);
            let dk: Vec<S> = y.levels[k].iter().zip(&cond).map(|(a, b)| *a - *b).collect();
            for (i, v) in dk.iter().enumerate() {
                if *v < worst.0 {
                    worst = (*v, k, i);
                }
            }
            let mut m = Vec::with_capacity(next.len());
            for (child, v) in next.iter().enumerate() {
                m.push(*v - cond[self.parent(child)]);
            }
            increments.push(dk);
            martingale.push(m);
        }
        if depth > 0 && worst.0 < -tolerance {
            return Err(Error::Property {
                property: "supermartingale: Y_k - E_k[Y_{k+1}] >= -tol".into(),
                worst: worst.0.as_f64(),
                location: format!("node ({}, {})", worst.1, worst.2),
            });
        }
        let mut increasing = Vec::with_capacity(depth + 1);
        increasing.push(vec![S::zero()]);
        for k in 0..depth {
            let prev: &Vec<S> = &increasing[k];
            let next: Vec<S> = (0..self.level_len(k + 1))
                .map(|child| {
                    let p = self.parent(child);
                    prev[p] + increments[k][p]
                })
                .collect();
            increasing.push(next);
        }
        let (coefficient, unspanned) = self.project_martingale(&martingale, depth);
        let increasing = AdaptedProcess::new(1, increasing);
        let martingale = AdaptedProcess::new(1, martingale);
        let reconstruction_residual = self.reconstruction_residual(y, &increasing, &martingale);
        let min_increment = if depth == 0 { S::zero() } else { worst.0 };
        Ok(PotentialDecomposition {
            increasing,
            increments: AdaptedProcess::new(1, increments),
            martingale,
            coefficient,
            unspanned,
            reconstruction_residual,
            min_increment,
        })
    }

    /// Martingale coefficient `Z_k = E_k[M_{k+1} dW'] / dt` of `y`.
    pub fn z_extract(&self, y: &AdaptedProcess<S>) -> Result<AdaptedProcess<S>> {
        self.check_scalar_process(y)?;
        let depth = y.depth();
        let mut martingale = vec![vec![S::zero()]];
        for k in 0..depth {
            let next = &y.levels[k + 1];
            let cond = self.step_expectation(next, 1, k);
            martingale.push(
                next.iter()
                    .enumerate()
                    .map(|(child, v)| *v - cond[self.parent(child)])
                    .collect(),
            );
        }
        Ok(self.project_martingale(&martingale, depth).0)
    }

    fn project_martingale(
        &self,
        martingale: &[Vec<S>],
        depth: usize,
    ) -> (AdaptedProcess<S>, AdaptedProcess<S>) {
        let m = self.dim;
        let branching = self.branching();
        let p = self.transition_probability();
        let inv_dt = S::one() / self.dt();
        let mut coeff = Vec::with_capacity(depth);
        let mut rest = Vec::with_capacity(depth);
        for k in 0..depth {
            let next = &martingale[k + 1];
            let mut zk = vec![S::zero(); self.level_len(k) * m];
            let mut rk = vec![S::zero(); self.level_len(k)];
            for i in 0..self.level_len(k) {
                let z = &mut zk[i * m..(i + 1) * m];
                for c in 0..branching {
                    let mc = next[self.child(i, c)];
                    for (zj, dw) in z.iter_mut().zip(self.increment(c)) {
                        *zj = *zj + mc * *dw;
                    }
                }
                for zj in z.iter_mut() {
                    *zj = *zj * p * inv_dt;
                }
                let mut var = S::zero();
                for c in 0..branching {
                    let spanned: S = z.iter().zip(self.increment(c)).map(|(a, b)| *a * *b).sum();
                    let r = next[self.child(i, c)] - spanned;
                    var = var + r * r;
                }
                rk[i] = var * p;
            }
            coeff.push(zk);
            rest.push(rk);
        }
        (AdaptedProcess::new(m, coeff), AdaptedProcess::new(1, rest))
    }

    fn reconstruction_residual(
        &self,
        y: &AdaptedProcess<S>,
        k_proc: &AdaptedProcess<S>,
        m_proc: &AdaptedProcess<S>,
    ) -> S {
        let depth = y.depth();
        let mut worst = S::zero();
        for leaf in 0..self.level_len(depth) {
            let mut mart = S::zero();
            let y_end = y.levels[depth][leaf];
            let k_end = k_proc.levels[depth][leaf];
            for k in (0..=depth).rev() {
                let i = self.ancestor(depth, leaf, k);
                let rebuilt = y_end + (k_end - k_proc.levels[k][i]) - mart;
                let r = (rebuilt - y.levels[k][i]).abs();
                if r > worst {
                    worst = r;
                }
                mart = mart + m_proc.levels[k][i];
            }
        }
        worst
    }

    fn check_scalar_process(&self, y: &AdaptedProcess<S>) -> Result<()> {
        if y.width != 1 {
            return Err(Error::Level(format!("expected a scalar process, got width {}", y.width)));
        }
        y.check_shape(self)
    }
}

fn total_node_count(dim: usize, steps: usize) -> Option<usize> {
    let mut total: usize = 0;
    for k in 0..=steps {
        let bits = dim.checked_mul(k)?;
        if bits >= usize::BITS as usize - 1 {
            return None;
        }
        total = total.checked_add(1usize << bits)?;
    }
    Some(total)
}

/// Borrowed handle on a tree node.
#[derive(Debug, Clone, Copy)]
pub struct NodeRef<'a, S> {
    tree: &'a PathTree<S>,
    pub level: usize,
    pub index: usize,
}

impl<'a, S: Real> NodeRef<'a, S> {
    pub fn tree(&self) -> &'a PathTree<S> {
        self.tree
    }

    pub fn time(&self) -> S {
        self.tree.grid.time(self.level)
    }

    /// `W` at this node.
    pub fn w(&self) -> &'a [S] {
        self.tree.position(self.level, self.index)
    }

    /// `W` at the ancestor on level `j <= self.level`.
    pub fn w_at(&self, j: usize) -> &'a [S] {
        let a = self.tree.ancestor(self.level, self.index, j);
        self.tree.position(j, a)
    }
}

/// Process indexed by tree nodes, `width` reals per node.
///
/// `levels[k]` holds `level_len(k) * width` values. A process may stop
/// before the terminal level (martingale coefficients live on `0..N`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess<S> {
    width: usize,
    levels: Vec<Vec<S>>,
}

impl<S: Real> AdaptedProcess<S> {
    pub fn new(width: usize, levels: Vec<Vec<S>>) -> Self {
        Self { width, levels }
    }

    pub fn zeros(tree: &PathTree<S>, width: usize, depth: usize) -> Self {
        Self::new(
            width,
            (0..=depth).map(|k| vec![S::zero(); tree.level_len(k) * width]).collect(),
        )
    }

    /// Scalar process on levels `0..=depth` from a node function.
    pub fn from_fn(tree: &PathTree<S>, depth: usize, mut f: impl FnMut(NodeRef<'_, S>) -> S) -> Self {
        let levels = (0..=depth)
            .map(|k| (0..tree.level_len(k)).map(|i| f(tree.node(k, i))).collect())
            .collect();
        Self::new(1, levels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Last level on which the process is defined.
    pub fn depth(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &[S] {
        &self.levels[k]
    }

    pub fn levels(&self) -> &[Vec<S>] {
        &self.levels
    }

    pub fn get(&self, k: usize, i: usize) -> &[S] {
        &self.levels[k][i * self.width..(i + 1) * self.width]
    }

    pub fn scalar(&self, k: usize, i: usize) -> S {
        self.levels[k][i * self.width]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::new(
            self.width,
            self.levels.iter().map(|l| l.iter().map(|v| f(*v)).collect()).collect(),
        )
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.width, other.width);
        Self::new(
            self.width,
            self.levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect())
                .collect(),
        )
    }

    pub fn max_abs(&self) -> S {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .fold(S::zero(), |a, v| a.max(v.abs()))
    }

    pub(crate) fn check_shape(&self, tree: &PathTree<S>) -> Result<()> {
        if self.levels.is_empty() || self.levels.len() > tree.steps() + 1 {
            return Err(Error::Level(format!(
                "process has {} levels; the tree has {}",
                self.levels.len(),
                tree.steps() + 1
            )));
        }
        for (k, l) in self.levels.iter().enumerate() {
            if l.len() != tree.level_len(k) * self.width {
                return Err(Error::Level(format!(
                    "level {k} holds {} values, expected {}",
                    l.len(),
                    tree.level_len(k) * self.width
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`PathTree::doob_meyer_decompose`].
#[derive(Debug, Clone)]
pub struct PotentialDecomposition<S> {
    /// `K`, predictable and nondecreasing with `K_0 = 0`.
    pub increasing: AdaptedProcess<S>,
    /// `dK_k = Y_k - E_k[Y_{k+1}]` on levels `0..depth`.
    pub increments: AdaptedProcess<S>,
    /// `M_k = Y_k - E_{k-1}[Y_k]`, with `M_0 = 0`.
    pub martingale: AdaptedProcess<S>,
    /// `Z_k = E_k[M_{k+1} dW'] / dt`, width `m`, levels `0..depth`.
    pub coefficient: AdaptedProcess<S>,
    /// `E_k[(M_{k+1} - Z_k dW)^2]`; identically zero when `m = 1`.
    pub unspanned: AdaptedProcess<S>,
    pub reconstruction_residual: S,
    pub min_increment: S,
}

impl<S: Real> PotentialDecomposition<S> {
    pub fn depth(&self) -> usize {
        self.increasing.depth()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tree(m: usize, n: usize, t: f64) -> PathTree<f64> {
        PathTree::build(m, TimeGrid::new(t, n).unwrap(), DEFAULT_NODE_BUDGET).unwrap()
    }

    #[test]
    fn small_tree_layout() {
        let t = tree(1, 2, 1.0);
        assert_eq!(t.total_nodes(), 7);
        assert_abs_diff_eq!(t.increment(1)[0], 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(t.increment(0)[0], -(0.5f64.sqrt()), epsilon = 1e-15);

        let t2 = tree(2, 1, 1.0);
        assert_eq!(t2.level_len(1), 4);
        assert_eq!(t2.node_probability(1), 0.25);
    }

    #[test]
    fn leaf_moments_three_steps() {
        let t = tree(1, 3, 1.0);
        let s = 1.0 / 3f64.sqrt();
        let mut leaves: Vec<f64> = t.positions[3].clone();
        leaves.sort_by(|a, b| a.partial_cmp(b).unwrap());
        leaves.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let expected = [-3.0 * s, -s, s, 3.0 * s];
        for (a, b) in leaves.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let sq: Vec<f64> = t.positions[3].iter().map(|w| w * w).collect();
        assert_abs_diff_eq!(t.mean(&sq), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let err = PathTree::<f64>::build(2, TimeGrid::new(1.0, 12).unwrap(), 1000).unwrap_err();
        assert!(err.to_string().contains("2^24"), "{err}");
    }

    #[test]
    fn conditional_expectations() {
        let t = tree(1, 4, 1.0);
        let c = vec![3.5; 16];
        assert!(t.conditional_expectation(&c, 1, 4, 2).unwrap().iter().all(|v| *v == 3.5));
        let w: Vec<f64> = t.positions[4].clone();
        assert_abs_diff_eq!(t.conditional_expectation(&w, 1, 4, 0).unwrap()[0], 0.0, epsilon = 1e-15);
        let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
        assert_abs_diff_eq!(t.conditional_expectation(&w2, 1, 4, 0).unwrap()[0], 1.0, epsilon = 1e-14);
        assert!(matches!(t.conditional_expectation(&w, 1, 2, 3), Err(Error::Level(_))));
    }

    #[test]
    fn martingale_has_no_increasing_part() {
        let t = tree(1, 3, 1.0);
        let y = AdaptedProcess::from_fn(&t, 3, |n| n.w()[0]);
        let dec = t.doob_meyer_decompose(&y, 1e-10).unwrap();
        assert!(dec.increasing.max_abs() < 1e-15);
        let z = t.z_extract(&y).unwrap();
        for k in 0..3 {
            for v in z.level(k) {
                assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_decreasing_process() {
        let t = tree(1, 4, 1.0);
        let y = AdaptedProcess::from_fn(&t, 4, |n| 1.0 - n.time());
        let dec = t.doob_meyer_decompose(&y, 1e-10).unwrap();
        for k in 0..=4 {
            for v in dec.increasing.level(k) {
                assert_abs_diff_eq!(*v, k as f64 * 0.25, epsilon = 1e-15);
            }
            for v in dec.martingale.level(k) {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-15);
            }
        }
        assert!(dec.reconstruction_residual < 1e-15);
    }

    #[test]
    fn z_of_conditional_square() {
        // E_k[W_T^2] = W_k^2 + (T - t_k), so Z_k = 2 W_k.
        let t = tree(1, 2, 1.0);
        let y = AdaptedProcess::from_fn(&t, 2, |n| n.w()[0].powi(2) + 1.0 - n.time());
        let z = t.z_extract(&y).unwrap();
        for k in 0..2 {
            for i in 0..t.level_len(k) {
                assert_abs_diff_eq!(z.scalar(k, i), 2.0 * t.position(k, i)[0], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn submartingale_is_rejected() {
        let t = tree(1, 2, 1.0);
        let y = AdaptedProcess::from_fn(&t, 2, |n| n.time());
        match t.doob_meyer_decompose(&y, 1e-10) {
            Err(Error::Property { worst, .. }) => assert!(worst < -0.4),
            other => panic!("expected property error, got {other:?}"),
        }
    }

    #[test]
    fn off_grid_time() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.index_of(0.5).unwrap(), 2);
        assert!(g.index_of(0.3).is_err());
        assert!(g.index_of(1.5).is_err());
    }
}
