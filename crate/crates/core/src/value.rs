//! Cost functionals `J(t, x; sigma)` and value functions `V(t, x)` on shift
//! lattice windows, the brute-force oracle, and optimal feedback extraction.
//!
//! A field entry `(k, node, w)` for base point `b` is the field at time
//! `t_k`, tree node `node`, and spatial point `b + unit * offset(k, w)`. The
//! window at level `k` holds every offset a controlled state can reach in `k`
//! steps, so values along any controlled path are read without interpolation.
//!
//! Two layouts share the recursion: [`Layout::Tree`] keeps one row per tree
//! node (any `m0`), [`Layout::Markov`] collapses the nodes of a level into one
//! row, which is exact for deterministic costs and allows long horizons.

use std::sync::Arc;

use rayon::prelude::*;

use crate::control::{enumerate_strategies, ControlSet, OpenLoop, Strategy, StrategyKind};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, PathTree, TimeGrid};
use crate::problem::{path_history, CostSpec, ObservedPath};
use crate::scalar::Real;
use crate::shift::ShiftLattice;

/// Cap on stored entries per base point.
pub const DEFAULT_FIELD_BUDGET: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Tree,
    Markov,
}

/// Adapted real field on lattice windows around a list of base points.
#[derive(Debug, Clone)]
pub struct ValueField<S> {
    layout: Layout,
    grid: TimeGrid<S>,
    m: usize,
    lattice: ShiftLattice<S>,
    bases: Vec<Vec<S>>,
    /// `values[b][k][node * window_len(k) + w]`.
    values: Vec<Vec<Vec<S>>>,
    /// Same layout as `values`, levels `0..N`.
    argmin: Option<Vec<Vec<Vec<u32>>>>,
}

impl<S: Real> ValueField<S> {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lattice(&self) -> &ShiftLattice<S> {
        &self.lattice
    }

    pub fn bases(&self) -> &[Vec<S>] {
        &self.bases
    }

    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    /// Rows stored at level `k`.
    pub fn nodes(&self, k: usize) -> usize {
        match self.layout {
            Layout::Tree => 1 << (self.m * k),
            Layout::Markov => 1,
        }
    }

    pub fn window_len(&self, k: usize) -> usize {
        self.lattice.window_len(k)
    }

    /// Window index of the base point itself.
    pub fn center(&self, k: usize) -> usize {
        self.lattice
            .index(k, &vec![0; self.lattice.dim()])
            .expect("zero offset is always inside")
    }

    fn row(&self, node: usize) -> usize {
        match self.layout {
            Layout::Tree => node,
            Layout::Markov => 0,
        }
    }

    /// Level-`k` values of base `b`, node-major.
    pub fn level(&self, b: usize, k: usize) -> &[S] {
        &self.values[b][k]
    }

    #[inline]
    pub fn get(&self, b: usize, k: usize, node: usize, w: usize) -> S {
        self.values[b][k][self.row(node) * self.window_len(k) + w]
    }

    pub fn at_offset(&self, b: usize, k: usize, node: usize, offset: &[i64]) -> Option<S> {
        self.lattice.index(k, offset).map(|w| self.get(b, k, node, w))
    }

    /// Value at time 0 and the base point.
    pub fn root(&self, b: usize) -> S {
        self.get(b, 0, 0, self.center(0))
    }

    pub fn roots(&self) -> Vec<S> {
        (0..self.num_bases()).map(|b| self.root(b)).collect()
    }

    /// Value at `(k, node)` and the base point itself.
    pub fn at_base(&self, b: usize, k: usize, node: usize) -> S {
        self.get(b, k, node, self.center(k))
    }

    pub fn has_argmin(&self) -> bool {
        self.argmin.is_some()
    }

    pub fn argmin(&self, b: usize, k: usize, node: usize, w: usize) -> Option<usize> {
        self.argmin
            .as_ref()
            .map(|a| a[b][k][self.row(node) * self.window_len(k) + w] as usize)
    }

    /// Spatial point of window entry `w` at level `k`.
    pub fn point(&self, b: usize, k: usize, w: usize) -> Vec<S> {
        self.lattice.point(&self.bases[b], &self.lattice.offset(k, w))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.layout != other.layout
            || self.steps() != other.steps()
            || self.num_bases() != other.num_bases()
            || self.lattice.unit() != other.lattice.unit()
            || self.lattice.reach() != other.lattice.reach()
        {
            return Err(Error::Level("fields have different shapes".into()));
        }
        let mut worst = S::zero();
        for (a, b) in self.values.iter().flatten().zip(other.values.iter().flatten()) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((*x - *y).abs());
            }
        }
        Ok(worst)
    }

    /// Window indices of `b + X^sigma` at every tree node for an open-loop table.
    pub fn path_indices(&self, table: &OpenLoop) -> Result<Vec<Vec<usize>>> {
        if self.layout != Layout::Tree {
            return Err(Error::Unsupported(
                "path-wise reads need the tree layout".into(),
            ));
        }
        let branching = 1usize << self.m;
        let mut out = vec![vec![self.center(0)]];
        for k in 0..self.steps() {
            let prev = &out[k];
            let mut next = vec![0usize; prev.len() * branching];
            for (i, w) in prev.iter().enumerate() {
                let u = table.at(k, i);
                for c in 0..branching {
                    next[(i << self.m) | c] = self.lattice.advance(k, *w, u, c);
                }
            }
            out.push(next);
        }
        Ok(out)
    }

    /// `Y_k = field(t_k, node, b + X^sigma_k)` as an adapted process.
    pub fn along(&self, b: usize, table: &OpenLoop) -> Result<AdaptedProcess<S>> {
        let idx = self.path_indices(table)?;
        let levels = idx
            .iter()
            .enumerate()
            .map(|(k, row)| row.iter().enumerate().map(|(i, w)| self.get(b, k, i, *w)).collect())
            .collect();
        Ok(AdaptedProcess::new(1, levels))
    }

    /// Spatial points `b + X^sigma_k` on the lattice, width `d`.
    pub fn along_points(&self, b: usize, table: &OpenLoop) -> Result<AdaptedProcess<S>> {
        let idx = self.path_indices(table)?;
        let levels = idx
            .iter()
            .enumerate()
            .map(|(k, row)| row.iter().flat_map(|w| self.point(b, k, *w)).collect())
            .collect();
        Ok(AdaptedProcess::new(self.lattice.dim(), levels))
    }

    /// Entry-wise combination of two fields on the same windows.
    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        let shape = |v: &Self| -> Vec<Vec<usize>> {
            v.values.iter().map(|b| b.iter().map(|l| l.len()).collect()).collect()
        };
        if self.layout != other.layout || shape(self) != shape(other) {
            return Err(Error::config("field", "fields live on different lattice windows"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(la, lb)| la.iter().zip(lb).map(|(x, y)| f(*x, *y)).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            layout: self.layout,
            grid: self.grid,
            m: self.m,
            lattice: self.lattice.clone(),
            bases: self.bases.clone(),
            values,
            argmin: None,
        })
    }

    /// Copy restricted to the listed base points, in that order.
    pub fn select(&self, bases: &[usize]) -> Self {
        Self {
            layout: self.layout,
            grid: self.grid,
            m: self.m,
            lattice: self.lattice.clone(),
            bases: bases.iter().map(|b| self.bases[*b].clone()).collect(),
            values: bases.iter().map(|b| self.values[*b].clone()).collect(),
            argmin: self
                .argmin
                .as_ref()
                .map(|a| bases.iter().map(|b| a[*b].clone()).collect()),
        }
    }

    /// Field with entries `f(b, k, node, point)` on the given layout.
    pub fn tabulate(
        layout: Layout,
        grid: TimeGrid<S>,
        m: usize,
        lattice: ShiftLattice<S>,
        bases: Vec<Vec<S>>,
        f: impl Fn(usize, usize, usize, &[S]) -> S,
    ) -> Self {
        let mut field = Self {
            layout,
            grid,
            m,
            lattice,
            bases,
            values: Vec::new(),
            argmin: None,
        };
        let mut values = Vec::with_capacity(field.bases.len());
        for b in 0..field.bases.len() {
            let mut levels = Vec::with_capacity(field.steps() + 1);
            for k in 0..=field.steps() {
                let wl = field.window_len(k);
                let mut row = Vec::with_capacity(field.nodes(k) * wl);
                for node in 0..field.nodes(k) {
                    for w in 0..wl {
                        row.push(f(b, k, node, &field.point(b, k, w)));
                    }
                }
                levels.push(row);
            }
            values.push(levels);
        }
        field.values = values;
        field
    }
}

/// `f(k, node, y, control, path)` as the sweep consumes it.
pub(crate) type NodeRunning<'a, S> =
    dyn Fn(usize, usize, &[S], usize, &ObservedPath<'_, S>) -> S + Sync + 'a;
/// `G(node, y, path)`.
pub(crate) type NodeTerminal<'a, S> = dyn Fn(usize, &[S], &ObservedPath<'_, S>) -> S + Sync + 'a;
/// `(k, node, window index, y, value) -> value` applied to each entry below
/// the horizon.
/// Levels of values and, optionally, argmin indices of one base point.
pub(crate) type SweepRun<S> = (Vec<Vec<S>>, Option<Vec<Vec<u32>>>);

pub(crate) type NodePost<'a, S> = dyn Fn(usize, usize, usize, &[S], S) -> S + Sync + 'a;
/// Markov feedback `(k, y) -> control`.
pub(crate) type MarkovRule<'a, S> = dyn Fn(usize, &[S]) -> usize + Sync + 'a;

pub(crate) enum Choice<'a, S> {
    Minimize,
    Constant(usize),
    Table(&'a OpenLoop),
    Rule(&'a MarkovRule<'a, S>),
}

/// Shared backward recursion over lattice windows.
pub(crate) struct Sweep<'a, S> {
    layout: Layout,
    grid: TimeGrid<S>,
    m: usize,
    m0: usize,
    controls: &'a ControlSet<S>,
    lattice: ShiftLattice<S>,
    /// `targets[k][(w * |U| + u) * branching + c]`.
    targets: Vec<Vec<usize>>,
    /// Observed histories `[k][node]`, empty when `m0 = 0`.
    histories: Vec<Vec<Vec<S>>>,
}

impl<'a, S: Real> Sweep<'a, S> {
    pub(crate) fn tree(tree: &PathTree<S>, controls: &'a ControlSet<S>, m0: usize) -> Result<Self> {
        if controls.m() != tree.dim() {
            return Err(Error::config(
                "controls",
                format!("control matrices have {} columns, the tree has m = {}", controls.m(), tree.dim()),
            ));
        }
        let histories = if m0 == 0 {
            Vec::new()
        } else {
            (0..=tree.steps())
                .map(|k| (0..tree.level_len(k)).map(|i| path_history(tree, m0, k, i)).collect())
                .collect()
        };
        Self::build(Layout::Tree, *tree.grid(), tree.dim(), m0, controls, histories)
    }

    pub(crate) fn markov(grid: &TimeGrid<S>, m: usize, controls: &'a ControlSet<S>) -> Result<Self> {
        if controls.m() != m {
            return Err(Error::config(
                "controls",
                format!("control matrices have {} columns, expected m = {m}", controls.m()),
            ));
        }
        Self::build(Layout::Markov, *grid, m, 0, controls, Vec::new())
    }

    fn build(
        layout: Layout,
        grid: TimeGrid<S>,
        m: usize,
        m0: usize,
        controls: &'a ControlSet<S>,
        histories: Vec<Vec<Vec<S>>>,
    ) -> Result<Self> {
        let lattice = ShiftLattice::new(controls, grid.dt().sqrt())?;
        let branching = 1usize << m;
        let mut entries = 0usize;
        for k in 0..=grid.steps() {
            let nodes = match layout {
                Layout::Tree => 1usize << (m * k),
                Layout::Markov => 1,
            };
            entries = entries.saturating_add(nodes.saturating_mul(lattice.window_len(k)));
        }
        if entries > DEFAULT_FIELD_BUDGET {
            return Err(Error::Size {
                what: "value field".into(),
                count: format!("{entries} entries per base point"),
                budget: DEFAULT_FIELD_BUDGET,
            });
        }
        let nu = controls.len();
        let targets = (0..grid.steps())
            .map(|k| {
                let wl = lattice.window_len(k);
                let mut t = Vec::with_capacity(wl * nu * branching);
                for w in 0..wl {
                    for u in 0..nu {
                        for c in 0..branching {
                            t.push(lattice.advance(k, w, u, c));
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            layout,
            grid,
            m,
            m0,
            controls,
            lattice,
            targets,
            histories,
        })
    }

    fn nodes(&self, k: usize) -> usize {
        match self.layout {
            Layout::Tree => 1 << (self.m * k),
            Layout::Markov => 1,
        }
    }

    #[inline]
    fn child_row(&self, node: usize, c: usize) -> usize {
        match self.layout {
            Layout::Tree => (node << self.m) | c,
            Layout::Markov => 0,
        }
    }

    fn observed(&self, k: usize, node: usize) -> ObservedPath<'_, S> {
        if self.m0 == 0 {
            ObservedPath::deterministic(k)
        } else {
            ObservedPath::new(self.m0, k, &self.histories[k][node])
        }
    }

    /// One backward sweep for one base point.
    pub(crate) fn run(
        &self,
        base: &[S],
        choice: &Choice<'_, S>,
        running: &NodeRunning<'_, S>,
        terminal: &NodeTerminal<'_, S>,
        keep_argmin: bool,
    ) -> SweepRun<S> {
        self.run_with(base, choice, running, terminal, keep_argmin, None)
    }

    /// [`Sweep::run`] with a nonlinear map applied after each step.
    pub(crate) fn run_with(
        &self,
        base: &[S],
        choice: &Choice<'_, S>,
        running: &NodeRunning<'_, S>,
        terminal: &NodeTerminal<'_, S>,
        keep_argmin: bool,
        post: Option<&NodePost<'_, S>>,
    ) -> SweepRun<S> {
        let n = self.grid.steps();
        let dt = self.grid.dt();
        let d = self.lattice.dim();
        let branching = 1usize << self.m;
        let p = S::one() / S::from_count(branching);
        let nu = self.controls.len();
        let points = |k: usize| -> Vec<S> {
            (0..self.lattice.window_len(k))
                .flat_map(|w| self.lattice.point(base, &self.lattice.offset(k, w)))
                .collect()
        };
        let mut values: Vec<Vec<S>> = vec![Vec::new(); n + 1];
        let mut argmin: Vec<Vec<u32>> = vec![Vec::new(); if keep_argmin { n } else { 0 }];
        {
            let pts = points(n);
            let wl = self.lattice.window_len(n);
            let mut row = Vec::with_capacity(self.nodes(n) * wl);
            for node in 0..self.nodes(n) {
                let obs = self.observed(n, node);
                for w in 0..wl {
                    row.push(terminal(node, &pts[w * d..(w + 1) * d], &obs));
                }
            }
            values[n] = row;
        }
        for k in (0..n).rev() {
            let pts = points(k);
            let wl = self.lattice.window_len(k);
            let wn = self.lattice.window_len(k + 1);
            let next = &values[k + 1];
            let targets = &self.targets[k];
            let mut row = Vec::with_capacity(self.nodes(k) * wl);
            let mut arg_row = Vec::with_capacity(if keep_argmin { self.nodes(k) * wl } else { 0 });
            for node in 0..self.nodes(k) {
                let obs = self.observed(k, node);
                for w in 0..wl {
                    let y = &pts[w * d..(w + 1) * d];
                    let eval = |u: usize| -> S {
                        let mut acc = S::zero();
                        for c in 0..branching {
                            let t = targets[(w * nu + u) * branching + c];
                            acc = acc + next[self.child_row(node, c) * wn + t];
                        }
                        running(k, node, y, u, &obs) * dt + acc * p
                    };
                    let (best, arg) = match choice {
                        Choice::Minimize => {
                            let mut best = eval(0);
                            let mut arg = 0usize;
                            for u in 1..nu {
                                let v = eval(u);
                                if v < best {
                                    best = v;
                                    arg = u;
                                }
                            }
                            (best, arg)
                        }
                        Choice::Constant(u) => (eval(*u), *u),
                        Choice::Table(t) => {
                            let u = t.at(k, node);
                            (eval(u), u)
                        }
                        Choice::Rule(r) => {
                            let u = r(k, y).min(nu - 1);
                            (eval(u), u)
                        }
                    };
                    row.push(match post {
                        Some(g) => g(k, node, w, y, best),
                        None => best,
                    });
                    if keep_argmin {
                        arg_row.push(arg as u32);
                    }
                }
            }
            values[k] = row;
            if keep_argmin {
                argmin[k] = arg_row;
            }
        }
        (values, keep_argmin.then_some(argmin))
    }

    pub(crate) fn into_field(
        self,
        bases: Vec<Vec<S>>,
        runs: Vec<SweepRun<S>>,
    ) -> ValueField<S> {
        let keep = runs.first().map(|r| r.1.is_some()).unwrap_or(false);
        let mut values = Vec::with_capacity(runs.len());
        let mut argmin = Vec::with_capacity(if keep { runs.len() } else { 0 });
        for (v, a) in runs {
            values.push(v);
            if let Some(a) = a {
                argmin.push(a);
            }
        }
        ValueField {
            layout: self.layout,
            grid: self.grid,
            m: self.m,
            lattice: self.lattice,
            bases,
            values,
            argmin: keep.then_some(argmin),
        }
    }
}

fn check_bases<S: Real>(bases: &[Vec<S>], d: usize) -> Result<()> {
    if let Some(i) = bases.iter().position(|b| b.len() != d) {
        return Err(Error::config(
            format!("base_points[{i}]"),
            format!("expected {d} coordinates, got {}", bases[i].len()),
        ));
    }
    Ok(())
}

fn spec_running<'s, S: Real>(
    spec: &'s CostSpec<S>,
    controls: &'s ControlSet<S>,
    grid: &'s TimeGrid<S>,
) -> impl Fn(usize, usize, &[S], usize, &ObservedPath<'_, S>) -> S + Sync + 's {
    move |k, _, y, u, obs| spec.f(grid.time(k), y, controls.get(u), obs)
}

fn spec_terminal<S: Real>(spec: &CostSpec<S>) -> impl Fn(usize, &[S], &ObservedPath<'_, S>) -> S + Sync + '_ {
    move |_, y, obs| spec.g_terminal(y, obs)
}

/// `J(t_k, node, y; sigma)` on the tree by one backward sweep per base point.
///
/// Feedback strategies are resolved into an open-loop table per base point
/// and that table is used at every spatial point of the window.
pub fn cost_functional<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    strategy: &Strategy<S>,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<ValueField<S>> {
    spec.check_compatible(controls, tree.dim())?;
    check_bases(bases, spec.d)?;
    let sweep = Sweep::tree(tree, controls, spec.m0)?;
    let tables: Vec<OpenLoop> = bases
        .iter()
        .map(|b| strategy.resolve(tree, controls, Some(b)))
        .collect::<Result<_>>()?;
    let running = spec_running(spec, controls, tree.grid());
    let terminal = spec_terminal(spec);
    let runs = bases
        .par_iter()
        .zip(tables.par_iter())
        .map(|(b, t)| sweep.run(b, &Choice::Table(t), &running, &terminal, false))
        .collect();
    Ok(sweep.into_field(bases.to_vec(), runs))
}

/// `J` on the recombining lattice; needs `m0 = 0` and a constant or feedback
/// strategy, with feedback evaluated at `(k, y)` for every window point.
pub fn cost_functional_markov<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    strategy: &Strategy<S>,
    grid: &TimeGrid<S>,
    bases: &[Vec<S>],
) -> Result<ValueField<S>> {
    require_markov(spec)?;
    spec.check_compatible(controls, spec.m)?;
    check_bases(bases, spec.d)?;
    let sweep = Sweep::markov(grid, spec.m, controls)?;
    let running = spec_running(spec, controls, grid);
    let terminal = spec_terminal(spec);
    let runs = match strategy {
        Strategy::Constant(u) => {
            if *u >= controls.len() {
                return Err(Error::Strategy(format!("constant control index {u} outside a set of {}", controls.len())));
            }
            bases
                .par_iter()
                .map(|b| sweep.run(b, &Choice::Constant(*u), &running, &terminal, false))
                .collect()
        }
        Strategy::Feedback(rule) => {
            let r = |k: usize, y: &[S]| rule(k, y);
            bases
                .par_iter()
                .map(|b| sweep.run(b, &Choice::Rule(&r), &running, &terminal, false))
                .collect()
        }
        Strategy::OpenLoop(_) => {
            return Err(Error::Unsupported(
                "open-loop tables need the tree layout".into(),
            ))
        }
    };
    Ok(sweep.into_field(bases.to_vec(), runs))
}

fn require_markov<S: Real>(spec: &CostSpec<S>) -> Result<()> {
    if spec.m0 != 0 {
        return Err(Error::Unsupported(format!(
            "problem `{}` depends on the path (m0 = {}); use the tree layout",
            spec.name, spec.m0
        )));
    }
    Ok(())
}

/// `V` by backward dynamic programming over the tree, with the argmin stored
/// (lowest index wins ties).
pub fn value_backward<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<ValueField<S>> {
    spec.check_compatible(controls, tree.dim())?;
    check_bases(bases, spec.d)?;
    let sweep = Sweep::tree(tree, controls, spec.m0)?;
    let running = spec_running(spec, controls, tree.grid());
    let terminal = spec_terminal(spec);
    let runs = bases
        .par_iter()
        .map(|b| sweep.run(b, &Choice::Minimize, &running, &terminal, true))
        .collect();
    Ok(sweep.into_field(bases.to_vec(), runs))
}

/// `V` on the recombining lattice (deterministic costs only).
pub fn value_markov<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    grid: &TimeGrid<S>,
    bases: &[Vec<S>],
) -> Result<ValueField<S>> {
    require_markov(spec)?;
    spec.check_compatible(controls, spec.m)?;
    check_bases(bases, spec.d)?;
    let sweep = Sweep::markov(grid, spec.m, controls)?;
    let running = spec_running(spec, controls, grid);
    let terminal = spec_terminal(spec);
    let runs = bases
        .par_iter()
        .map(|b| sweep.run(b, &Choice::Minimize, &running, &terminal, true))
        .collect();
    Ok(sweep.into_field(bases.to_vec(), runs))
}

/// Literal minimum of `J` over every open-loop strategy on the tree.
///
/// Each `J` is evaluated by walking all descendant paths of every node with
/// real-valued state increments; nothing is shared with the backward sweep.
pub fn value_bruteforce<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
    budget: usize,
) -> Result<ValueField<S>> {
    spec.check_compatible(controls, tree.dim())?;
    check_bases(bases, spec.d)?;
    let strategies: Vec<OpenLoop> =
        enumerate_strategies(tree, controls, StrategyKind::OpenLoop, budget)?.collect();
    let lattice = ShiftLattice::new(controls, tree.sqrt_dt())?;
    let n = tree.steps();
    let histories: Vec<Vec<Vec<S>>> = (0..=n)
        .map(|k| (0..tree.level_len(k)).map(|i| path_history(tree, spec.m0, k, i)).collect())
        .collect();
    let values: Vec<Vec<Vec<S>>> = bases
        .par_iter()
        .map(|base| {
            (0..=n)
                .map(|k| {
                    let wl = lattice.window_len(k);
                    let mut row = vec![S::infinity(); tree.level_len(k) * wl];
                    for i in 0..tree.level_len(k) {
                        for w in 0..wl {
                            let y = lattice.point(base, &lattice.offset(k, w));
                            let slot = &mut row[i * wl + w];
                            for table in &strategies {
                                let j = path_cost(spec, controls, tree, &histories, table, k, i, &y);
                                if j < *slot {
                                    *slot = j;
                                }
                            }
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();
    Ok(ValueField {
        layout: Layout::Tree,
        grid: *tree.grid(),
        m: tree.dim(),
        lattice,
        bases: bases.to_vec(),
        values,
        argmin: None,
    })
}

/// Mean over the leaves below `(k, i)` of the accumulated path cost from `y`.
#[allow(clippy::too_many_arguments)]
fn path_cost<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    histories: &[Vec<Vec<S>>],
    table: &OpenLoop,
    k: usize,
    i: usize,
    y: &[S],
) -> S {
    let n = tree.steps();
    let m = tree.dim();
    let dt = tree.dt();
    let below = 1usize << (m * (n - k));
    let mut total = S::zero();
    let obs = |level: usize, node: usize| ObservedPath::new(spec.m0, level, &histories[level][node]);
    for tail in 0..below {
        let leaf = (i << (m * (n - k))) | tail;
        let mut x = y.to_vec();
        let mut cost = S::zero();
        for j in k..n {
            let node = tree.ancestor(n, leaf, j);
            let u = table.at(j, node);
            cost = cost + spec.f(tree.grid().time(j), &x, controls.get(u), &obs(j, node)) * dt;
            let c = tree.ancestor(n, leaf, j + 1) & ((1 << m) - 1);
            controls.apply(u, tree.increment(c), &mut x);
        }
        cost = cost + spec.g_terminal(&x, &obs(n, leaf));
        total = total + cost;
    }
    total / S::from_count(below)
}

/// Strategy reading the stored argmin along the paths started at base `b`.
///
/// Tree fields give an open-loop table; Markov fields give a feedback rule
/// that locates `(k, y)` on the base point's lattice.
pub fn optimal_feedback<S: Real>(value: &ValueField<S>, b: usize) -> Result<Strategy<S>> {
    let argmin = value
        .argmin
        .as_ref()
        .ok_or_else(|| Error::Strategy("field carries no argmin data".into()))?;
    if b >= value.num_bases() {
        return Err(Error::Strategy(format!("base index {b} out of range")));
    }
    match value.layout {
        Layout::Tree => {
            let branching = 1usize << value.m;
            let mut idx = vec![value.center(0)];
            let mut levels = Vec::with_capacity(value.steps());
            for (k, choice) in argmin[b].iter().enumerate().take(value.steps()) {
                let wl = value.window_len(k);
                let mut table = Vec::with_capacity(idx.len());
                let mut next = vec![0usize; idx.len() * branching];
                for (i, w) in idx.iter().enumerate() {
                    let u = choice[i * wl + w];
                    table.push(u);
                    for c in 0..branching {
                        next[(i << value.m) | c] = value.lattice.advance(k, *w, u as usize, c);
                    }
                }
                levels.push(table);
                idx = next;
            }
            Ok(Strategy::OpenLoop(OpenLoop::new(levels)))
        }
        Layout::Markov => {
            let table = Arc::new(argmin[b].clone());
            let lattice = value.lattice.clone();
            let base = value.bases[b].clone();
            let rule = move |k: usize, y: &[S]| -> usize {
                if k >= table.len() {
                    return 0;
                }
                let offset: Vec<i64> = y
                    .iter()
                    .zip(&base)
                    .map(|(a, c)| ((*a - *c) / lattice.unit()).round().to_i64().unwrap_or(i64::MAX))
                    .collect();
                lattice
                    .index(k, &offset)
                    .map(|w| table[k][w] as usize)
                    .unwrap_or(0)
            };
            Ok(Strategy::Feedback(Arc::new(rule)))
        }
    }
}
