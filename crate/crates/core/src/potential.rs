//! Linear shifted solves, the semigroup `P^sigma`, regular potentials and
//! their random measures, the vanishing-infimum certificate, and gradient
//! diagnostics.
//!
//! A potential is handled through its values along controlled paths: for a
//! base point `x` and strategy `sigma`, `Y_k = u(t_k, x + X^sigma_k)` is an
//! adapted process on the tree and `K`, `Z` come from its Doob-Meyer split.

use rayon::prelude::*;

use crate::control::{concat_strategy, state_from_table, ControlSet, OpenLoop, Strategy};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, PathTree, PotentialDecomposition, TimeGrid};
use crate::problem::{CostSpec, ObservedPath};
use crate::scalar::Real;
use crate::shift::ShiftLattice;
use crate::spatial::SpatialGrid;
use crate::value::{cost_functional, optimal_feedback, value_backward, Choice, Layout, Sweep, ValueField};

/// Random field `(k, node, y) -> value`.
pub type RandomField<'a, S> = dyn Fn(usize, usize, &[S]) -> S + Sync + 'a;

/// Deterministic field tabulated on a [`SpatialGrid`], multilinear between
/// grid points and zero outside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<S> {
    grid: SpatialGrid<S>,
    values: Vec<S>,
}

impl<S: Real> GridField<S> {
    pub fn new(grid: SpatialGrid<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::config(
                "field",
                format!("{} values for {} grid points", values.len(), grid.len()),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: SpatialGrid<S>, f: impl Fn(&[S]) -> S) -> Self {
        let values = grid.points().map(f).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &SpatialGrid<S> {
        &self.grid
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn eval(&self, y: &[S]) -> S {
        let h = self.grid.spacing();
        let n = self.grid.per_axis();
        let first = -self.grid.radius() + h / S::lit(2.0);
        // Fractional grid coordinates per axis.
        let mut lo = [0usize; 2];
        let mut frac = [S::zero(); 2];
        for (r, v) in y.iter().enumerate() {
            let s = (*v - first) / h;
            let snapped = s.round();
            let s = if (s - snapped).abs() <= S::snap_tolerance() * S::from_count(n) {
                snapped
            } else {
                s
            };
            if s < S::zero() || s > S::from_count(n - 1) {
                return S::zero();
            }
            let f = s.floor();
            let i = f.to_usize().unwrap_or(0).min(n - 1);
            lo[r] = i;
            frac[r] = s - f;
        }
        let at = |idx: &[usize]| -> S {
            let mut flat = 0usize;
            for i in idx {
                if *i >= n {
                    return S::zero();
                }
                flat = flat * n + i;
            }
            self.values[flat]
        };
        match self.grid.dim() {
            1 => {
                let a = at(&[lo[0]]);
                if frac[0] == S::zero() {
                    return a;
                }
                a * (S::one() - frac[0]) + at(&[lo[0] + 1]) * frac[0]
            }
            _ => {
                let mut acc = S::zero();
                for (dx, wx) in [(0, S::one() - frac[0]), (1, frac[0])] {
                    for (dy, wy) in [(0, S::one() - frac[1]), (1, frac[1])] {
                        let w = wx * wy;
                        if w != S::zero() {
                            acc = acc + w * at(&[lo[0] + dx, lo[1] + dy]);
                        }
                    }
                }
                acc
            }
        }
    }

    pub fn l2_norm(&self) -> S {
        self.values.iter().map(|v| *v * *v).sum::<S>().sqrt() * self.grid.weight().sqrt()
    }
}

/// Output of [`solve_linear_shifted`].
#[derive(Debug, Clone)]
pub struct LinearSolution<S> {
    pub u: ValueField<S>,
    /// Per base point, `Z` of `u(., b + X^sigma)`.
    pub z: Vec<AdaptedProcess<S>>,
    /// Per base point, `u(t_k, b + X^sigma_k)`.
    pub paths: Vec<AdaptedProcess<S>>,
}

/// `u(t_k, node, y) = E_node[Psi(y + X_N - X_k) + sum_{j>=k} f(t_j, y + X_j - X_k) dt]`
/// with `Z` extracted along the paths of `sigma` from each base point.
pub fn solve_linear_shifted<S: Real>(
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    running: &RandomField<'_, S>,
    terminal: &(dyn Fn(usize, &[S]) -> S + Sync),
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<LinearSolution<S>> {
    let sweep = Sweep::tree(tree, controls, 0)?;
    let tables: Vec<OpenLoop> = bases
        .iter()
        .map(|b| sigma.resolve(tree, controls, Some(b)))
        .collect::<Result<_>>()?;
    let f = |k: usize, node: usize, y: &[S], _: usize, _: &ObservedPath<'_, S>| running(k, node, y);
    let g = |node: usize, y: &[S], _: &ObservedPath<'_, S>| terminal(node, y);
    let runs = bases
        .par_iter()
        .zip(tables.par_iter())
        .map(|(b, t)| sweep.run(b, &Choice::Table(t), &f, &g, false))
        .collect();
    let u = sweep.into_field(bases.to_vec(), runs);
    let mut z = Vec::with_capacity(bases.len());
    let mut paths = Vec::with_capacity(bases.len());
    for (b, t) in tables.iter().enumerate() {
        let y = u.along(b, t)?;
        z.push(tree.z_extract(&y)?);
        paths.push(y);
    }
    Ok(LinearSolution { u, z, paths })
}

/// `(P^sigma_s u)(t0)` at the given points, one row per level-`k0` node:
/// `E_{t0}[u(t0 + s, x + X_{t0+s} - X_{t0})]`, or zero when `t0 + s > T`.
///
/// `u(node, y)` is read with `node` at the level of `t0 + s`.
pub fn semigroup_apply<S: Real>(
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    u: &(dyn Fn(usize, &[S]) -> S + Sync),
    t0: S,
    s: S,
    tree: &PathTree<S>,
    points: &[Vec<S>],
) -> Result<Vec<Vec<S>>> {
    let k0 = tree.grid().index_of(t0)?;
    if s < S::zero() {
        return Err(Error::config("s", "semigroup parameter must be nonnegative"));
    }
    if t0 + s > tree.grid().horizon() + S::snap_tolerance() * tree.grid().horizon() {
        return Ok(vec![vec![S::zero(); points.len()]; tree.level_len(k0)]);
    }
    let k1 = tree.grid().index_of(t0 + s)?;
    let table = sigma.resolve(tree, controls, None)?;
    let x = state_from_table(&table, tree, controls);
    let d = controls.d();
    let span = 1usize << (tree.dim() * (k1 - k0));
    let prob = S::one() / S::from_count(span);
    let out = (0..tree.level_len(k0))
        .into_par_iter()
        .map(|i| {
            let x0 = x.get(k0, i);
            let mut y = vec![S::zero(); d];
            points
                .iter()
                .map(|p| {
                    let mut acc = S::zero();
                    for tail in 0..span {
                        let j = (i << (tree.dim() * (k1 - k0))) | tail;
                        let x1 = x.get(k1, j);
                        for r in 0..d {
                            y[r] = p[r] + x1[r] - x0[r];
                        }
                        acc = acc + u(j, &y);
                    }
                    acc * prob
                })
                .collect()
        })
        .collect();
    Ok(out)
}

/// `P^sigma_s u` for a constant control and a deterministic field, using the
/// recombining distribution of `X_{t0+s} - X_{t0}` after `steps` steps.
pub fn semigroup_markov<S: Real>(
    controls: &ControlSet<S>,
    control: usize,
    sqrt_dt: S,
    steps: usize,
    u: &(dyn Fn(&[S]) -> S + Sync),
    points: &[Vec<S>],
) -> Result<Vec<S>> {
    if control >= controls.len() {
        return Err(Error::Strategy(format!("control index {control} outside a set of {}", controls.len())));
    }
    let single = controls.restrict(control);
    let lat = ShiftLattice::new(&single, sqrt_dt)?;
    let br = 1usize << controls.m();
    let p = S::one() / S::from_count(br);
    let mut dist = vec![S::zero(); lat.window_len(0)];
    dist[0] = S::one();
    for k in 0..steps {
        let mut next = vec![S::zero(); lat.window_len(k + 1)];
        for (w, q) in dist.iter().enumerate() {
            if *q == S::zero() {
                continue;
            }
            for c in 0..br {
                let t = lat.advance(k, w, 0, c);
                next[t] = next[t] + *q * p;
            }
        }
        dist = next;
    }
    let offsets: Vec<(Vec<i64>, S)> = dist
        .iter()
        .enumerate()
        .filter(|(_, q)| **q != S::zero())
        .map(|(w, q)| (lat.offset(steps, w), *q))
        .collect();
    Ok(points
        .par_iter()
        .map(|x| offsets.iter().map(|(o, q)| *q * u(&lat.point(x, o))).sum())
        .collect())
}

/// `sum_k ||P_s u(t_k) - u(t_k)||^2 dt` over `k < N` for a constant control and
/// a deterministic field `u(t, x)`, with `P_s u = 0` once `t_k + s > T`.
pub fn strong_continuity_statistic<S: Real>(
    controls: &ControlSet<S>,
    control: usize,
    grid: &TimeGrid<S>,
    space: &SpatialGrid<S>,
    u: &(dyn Fn(S, &[S]) -> S + Sync),
    shift_steps: usize,
) -> Result<S> {
    let dt = grid.dt();
    let points = space.point_list();
    let mut total = S::zero();
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let now: Vec<S> = points.iter().map(|p| u(t, p)).collect();
        let shifted = if k + shift_steps <= grid.steps() {
            let later = grid.time(k + shift_steps);
            let f = |y: &[S]| u(later, y);
            semigroup_markov(controls, control, dt.sqrt(), shift_steps, &f, &points)?
        } else {
            vec![S::zero(); points.len()]
        };
        let diff: Vec<S> = shifted.iter().zip(&now).map(|(a, b)| (*a - *b) * (*a - *b)).collect();
        total = total + space.integrate(&diff)? * dt;
    }
    Ok(total)
}

/// Output of [`penalize_potential`].
#[derive(Debug, Clone)]
pub struct Penalized<S> {
    pub u_n: AdaptedProcess<S>,
    /// `dK^n_k = n (u_k - u_n,k) dt`, levels `0..N`.
    pub increments: AdaptedProcess<S>,
    pub increasing: AdaptedProcess<S>,
    pub z: AdaptedProcess<S>,
}

fn check_penalty<S: Real>(n: S) -> Result<()> {
    if !(n > S::zero()) || !n.is_finite() {
        return Err(Error::config("n", format!("penalty must be positive and finite, got {n}")));
    }
    Ok(())
}

fn accumulate<S: Real>(tree: &PathTree<S>, increments: &[Vec<S>]) -> AdaptedProcess<S> {
    let mut levels = vec![vec![S::zero()]];
    for (k, inc) in increments.iter().enumerate() {
        let prev = &levels[k];
        let next = (0..tree.level_len(k + 1))
            .map(|c| {
                let p = tree.parent(c);
                prev[p] + inc[p]
            })
            .collect();
        levels.push(next);
    }
    AdaptedProcess::new(1, levels)
}

/// Implicit penalization of a candidate potential along one family of paths:
/// `u_n(t_N) = 0`, `u_n(t_k) = (E_k[u_n(t_{k+1})] + n dt u(t_k)) / (1 + n dt)`.
pub fn penalize_potential<S: Real>(tree: &PathTree<S>, u: &AdaptedProcess<S>, n: S) -> Result<Penalized<S>> {
    check_penalty(n)?;
    u.check_shape(tree)?;
    let depth = u.depth();
    if u.level(depth).iter().any(|v| *v != S::zero()) {
        return Err(Error::Property {
            property: "potential vanishes at the horizon".into(),
            worst: u.level(depth).iter().fold(0.0, |a, v| a.max(v.abs().as_f64())),
            location: format!("level {depth}"),
        });
    }
    let ndt = n * tree.dt();
    let mut levels = vec![Vec::new(); depth + 1];
    levels[depth] = vec![S::zero(); tree.level_len(depth)];
    let mut incs = vec![Vec::new(); depth];
    for k in (0..depth).rev() {
        let e = tree.step_expectation(&levels[k + 1], 1, k);
        let row: Vec<S> = e
            .iter()
            .zip(u.level(k))
            .map(|(e, uk)| (*e + ndt * *uk) / (S::one() + ndt))
            .collect();
        incs[k] = row.iter().zip(u.level(k)).map(|(a, b)| ndt * (*b - *a)).collect();
        levels[k] = row;
    }
    let u_n = AdaptedProcess::new(1, levels);
    let z = tree.z_extract(&u_n)?;
    let increasing = accumulate(tree, &incs);
    Ok(Penalized {
        u_n,
        increments: AdaptedProcess::new(1, incs),
        increasing,
        z,
    })
}

/// Values of a field along controlled paths, one process per base point.
#[derive(Debug, Clone)]
pub struct PathField<S> {
    pub bases: Vec<Vec<S>>,
    pub values: Vec<AdaptedProcess<S>>,
    /// `b + X^sigma_k` at every node, width `d`.
    pub points: Vec<AdaptedProcess<S>>,
}

/// `J(., b + X^sigma; sigma) - V(., b + X^sigma)` along the paths of
/// `sigma(b)`, the potential generated by a suboptimal strategy.
pub fn cost_gap_potential<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    sigma: &Strategy<S>,
    tree: &PathTree<S>,
    value: &ValueField<S>,
) -> Result<PathField<S>> {
    let bases = value.bases().to_vec();
    let tables: Vec<OpenLoop> = bases
        .iter()
        .map(|b| sigma.resolve(tree, controls, Some(b)))
        .collect::<Result<_>>()?;
    gap_along_tables(spec, controls, tree, value, &tables)
}

fn gap_along_tables<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    value: &ValueField<S>,
    tables: &[OpenLoop],
) -> Result<PathField<S>> {
    let bases = value.bases().to_vec();
    let parts: Vec<(AdaptedProcess<S>, AdaptedProcess<S>)> = (0..bases.len())
        .into_par_iter()
        .map(|b| {
            let strategy = Strategy::OpenLoop(tables[b].clone());
            let j = cost_functional(spec, controls, &strategy, tree, &bases[b..b + 1])?;
            let jy = j.along(0, &tables[b])?;
            let vy = value.along(b, &tables[b])?;
            let mut gap = jy.zip_with(&vy, |a, c| a - c);
            // J and V agree at the horizon by construction.
            let depth = gap.depth();
            gap = AdaptedProcess::new(
                1,
                gap.levels()
                    .iter()
                    .enumerate()
                    .map(|(k, l)| if k == depth { vec![S::zero(); l.len()] } else { l.clone() })
                    .collect(),
            );
            Ok((gap, value.along_points(b, &tables[b])?))
        })
        .collect::<Result<_>>()?;
    let (values, points) = parts.into_iter().unzip();
    Ok(PathField { bases, values, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Penalized,
    Envelope,
    CostGap,
}

/// Both sides of the energy identity at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport<S> {
    /// `E[||u(t_k)||^2 + sum_{j>=k} ||Z_j||^2 dt]` (plus the unspanned
    /// remainder when `m >= 2`).
    pub lhs: Vec<S>,
    /// `E int (K_T - K_{t_k})^2 dx`.
    pub rhs: Vec<S>,
    pub residual: S,
}

#[derive(Debug, Clone)]
pub struct RegularPotential<S> {
    pub provenance: Provenance,
    pub paths: PathField<S>,
    pub decompositions: Vec<PotentialDecomposition<S>>,
    /// Quadrature weight of each base point.
    pub weight: S,
    pub energy: EnergyReport<S>,
}

impl<S: Real> RegularPotential<S> {
    /// `E[K_T(b)]` per base point.
    pub fn total_mass(&self, tree: &PathTree<S>) -> Vec<S> {
        self.decompositions
            .iter()
            .map(|d| tree.mean(d.increasing.level(d.depth())))
            .collect()
    }

    /// `E|K_T|^2 / E sup_k |u(t_k, b + X_k)|^2`, the largest ratio over bases
    /// with a nonzero denominator, together with its finiteness.
    pub fn remark_ratio(&self, tree: &PathTree<S>) -> S {
        let mut worst = S::zero();
        for (d, y) in self.decompositions.iter().zip(&self.paths.values) {
            let n = d.depth();
            let kt2: Vec<S> = d.increasing.level(n).iter().map(|v| *v * *v).collect();
            let sup: Vec<S> = (0..tree.level_len(n))
                .map(|leaf| {
                    (0..=n)
                        .map(|k| y.level(k)[tree.ancestor(n, leaf, k)].powi(2))
                        .fold(S::zero(), S::max)
                })
                .collect();
            let den = tree.mean(&sup);
            if den > S::zero() {
                worst = worst.max(tree.mean(&kt2) / den);
            }
        }
        worst
    }
}

/// Doob-Meyer split of every path process plus the energy identity,
/// integrated with weight `weight` per base point.
pub fn decompose_potential<S: Real>(
    tree: &PathTree<S>,
    paths: PathField<S>,
    weight: S,
    provenance: Provenance,
    tolerance: S,
) -> Result<RegularPotential<S>> {
    let mut decompositions = Vec::with_capacity(paths.values.len());
    for (b, y) in paths.values.iter().enumerate() {
        let lowest = y.levels().iter().flatten().copied().fold(S::infinity(), S::min);
        if lowest < -tolerance {
            return Err(Error::Property {
                property: "potential is nonnegative".into(),
                worst: lowest.as_f64(),
                location: format!("base {b}"),
            });
        }
        let top = y.level(y.depth()).iter().fold(S::zero(), |a, v| a.max(v.abs()));
        if top > tolerance {
            return Err(Error::Property {
                property: "potential vanishes at the horizon".into(),
                worst: top.as_f64(),
                location: format!("base {b}"),
            });
        }
        decompositions.push(tree.doob_meyer_decompose(y, tolerance)?);
    }
    let energy = energy_identity(tree, &paths.values, &decompositions, weight);
    Ok(RegularPotential {
        provenance,
        paths,
        decompositions,
        weight,
        energy,
    })
}

fn energy_identity<S: Real>(
    tree: &PathTree<S>,
    values: &[AdaptedProcess<S>],
    decs: &[PotentialDecomposition<S>],
    weight: S,
) -> EnergyReport<S> {
    let n = tree.steps();
    let dt = tree.dt();
    let mut lhs = vec![S::zero(); n + 1];
    let mut rhs = vec![S::zero(); n + 1];
    for (y, dec) in values.iter().zip(decs) {
        // Tail sums of E|Z_j|^2 dt + E[unspanned_j].
        let mut tail = vec![S::zero(); n + 1];
        for j in (0..n).rev() {
            let zsq: Vec<S> = dec
                .coefficient
                .level(j)
                .chunks(tree.dim())
                .map(|z| z.iter().map(|v| *v * *v).sum())
                .collect();
            tail[j] = tail[j + 1] + tree.mean(&zsq) * dt + tree.mean(dec.unspanned.level(j));
        }
        let kn = dec.increasing.level(n);
        for k in 0..=n {
            let ysq: Vec<S> = y.level(k).iter().map(|v| *v * *v).collect();
            lhs[k] = lhs[k] + weight * (tree.mean(&ysq) + tail[k]);
            let kk = dec.increasing.level(k);
            let sq: Vec<S> = kn
                .iter()
                .enumerate()
                .map(|(leaf, v)| {
                    let r = *v - kk[tree.ancestor(n, leaf, k)];
                    r * r
                })
                .collect();
            rhs[k] = rhs[k] + weight * tree.mean(&sq);
        }
    }
    let residual = lhs.iter().zip(&rhs).map(|(a, b)| (*a - *b).abs()).fold(S::zero(), S::max);
    EnergyReport { lhs, rhs, residual }
}

/// `mu(phi 1_{[t, T]}) = sum_b w E sum_{t_j >= t} phi(t_j, b + X_j) dK_j`.
pub fn measure_eval<S: Real>(
    tree: &PathTree<S>,
    potential: &RegularPotential<S>,
    phi: &dyn Fn(S, &[S]) -> S,
    t: S,
) -> Result<S> {
    let start = tree.grid().index_of(t)?;
    let d = potential.paths.points.first().map(|p| p.width()).unwrap_or(1);
    let mut total = S::zero();
    for (dec, pts) in potential.decompositions.iter().zip(&potential.paths.points) {
        for j in start..dec.depth() {
            let vals: Vec<S> = dec
                .increments
                .level(j)
                .iter()
                .enumerate()
                .map(|(i, dk)| phi(tree.grid().time(j), &pts.level(j)[i * d..(i + 1) * d]) * *dk)
                .collect();
            total = total + tree.mean(&vals) * potential.weight;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CertificateMode {
    /// `sigma^i` is the stored argmin feedback from the cell center.
    ExactFeedback,
    /// `sigma^i` is the constant `control` in every cell.
    Constant { control: usize },
    /// `sigma^i` plays `control` until the latest grid time that keeps the
    /// center's gap below `eps`, then the optimal feedback.
    Degraded { control: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport<S> {
    pub cell: usize,
    pub center: Vec<S>,
    /// `J(0, x_i; sigma^i) - V(0, x_i)`.
    pub gap: S,
    /// `sum_{x in cell} w E[K_T(x)]`.
    pub mass: S,
    /// First level played by the optimal feedback.
    pub switch_level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport<S> {
    pub eps: S,
    pub cells: Vec<CellReport<S>>,
    pub mass: S,
    pub volume: S,
    /// `mass / ((2 L1 + 1) |box| eps^alpha)`.
    pub bound_ratio: S,
}

/// Aggregated measure mass of the family `{mu^{sigma^i}}` over disjoint cells
/// of width `eps` covering the grid.
pub fn measure_infimum_certificate<S: Real>(
    spec: &CostSpec<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    space: &SpatialGrid<S>,
    eps: S,
    mode: CertificateMode,
) -> Result<CertificateReport<S>> {
    if !(eps > S::zero()) {
        return Err(Error::config("eps", "must be positive"));
    }
    if let CertificateMode::Constant { control } | CertificateMode::Degraded { control } = mode {
        if control >= controls.len() {
            return Err(Error::Strategy(format!("control index {control} outside a set of {}", controls.len())));
        }
    }
    let h = space.spacing();
    let ratio = eps / h;
    let per_cell = ratio.round();
    if (ratio - per_cell).abs() > S::lit(1e-9) * ratio || per_cell < S::one() {
        return Err(Error::config("eps", format!("cell width {eps} must be a multiple of h = {h}")));
    }
    let per_cell = per_cell.to_usize().unwrap_or(1);
    let n_axis = space.per_axis();
    if !n_axis.is_multiple_of(per_cell) {
        return Err(Error::config("eps", format!("box side 2R is not a multiple of the cell width {eps}")));
    }
    let cells_axis = n_axis / per_cell;
    let d = space.dim();
    let n_cells = cells_axis.pow(d as u32);
    // Grid points of each cell, then the cell centers.
    let mut members = vec![Vec::new(); n_cells];
    for p in 0..space.len() {
        let mut rest = p;
        let mut idx = [0usize; 2];
        for r in (0..d).rev() {
            idx[r] = rest % n_axis;
            rest /= n_axis;
        }
        let mut cell = 0;
        for r in idx.iter().take(d) {
            cell = cell * cells_axis + r / per_cell;
        }
        members[cell].push(p);
    }
    let centers: Vec<Vec<S>> = members
        .iter()
        .map(|m| {
            let first = space.point(m[0]);
            first
                .iter()
                .map(|v| *v - h / S::lit(2.0) + eps / S::lit(2.0))
                .collect()
        })
        .collect();
    let mut bases: Vec<Vec<S>> = space.point_list();
    bases.extend(centers.iter().cloned());
    let value = value_backward(spec, controls, tree, &bases)?;
    let offset = space.len();
    let weight = space.weight();
    let cells: Vec<CellReport<S>> = (0..n_cells)
        .into_par_iter()
        .map(|ci| -> Result<CellReport<S>> {
            let center = &centers[ci];
            let optimal = optimal_feedback(&value, offset + ci)?;
            let (table, switch_level, gap) = match mode {
                CertificateMode::ExactFeedback => {
                    let t = optimal.resolve(tree, controls, Some(center))?;
                    let j = cost_functional(spec, controls, &Strategy::OpenLoop(t.clone()), tree, std::slice::from_ref(center))?;
                    (t, 0, j.root(0) - value.root(offset + ci))
                }
                CertificateMode::Constant { control } => {
                    let t = OpenLoop::constant(tree, control);
                    let j = cost_functional(spec, controls, &Strategy::OpenLoop(t.clone()), tree, std::slice::from_ref(center))?;
                    (t, tree.steps(), j.root(0) - value.root(offset + ci))
                }
                CertificateMode::Degraded { control } => {
                    let mut chosen = None;
                    for level in 0..=tree.steps() {
                        let s = concat_strategy(
                            &Strategy::Constant(control),
                            &optimal,
                            tree.grid().time(level),
                            tree,
                            controls,
                            Some(center),
                        )?;
                        let Strategy::OpenLoop(t) = s else { unreachable!() };
                        let j = cost_functional(spec, controls, &Strategy::OpenLoop(t.clone()), tree, std::slice::from_ref(center))?;
                        let gap = j.root(0) - value.root(offset + ci);
                        if gap < eps {
                            chosen = Some((t, level, gap));
                        } else {
                            break;
                        }
                    }
                    chosen.ok_or_else(|| Error::Strategy("no eps-optimal switch time".into()))?
                }
            };
            let mut mass = S::zero();
            for p in &members[ci] {
                let strategy = Strategy::OpenLoop(table.clone());
                let sub = single_base(&value, *p);
                let paths = cost_gap_potential(spec, controls, &strategy, tree, &sub)?;
                let pot = decompose_potential(tree, paths, weight, Provenance::CostGap, S::lit(1e-10))?;
                mass = mass + pot.total_mass(tree)[0] * weight;
            }
            Ok(CellReport {
                cell: ci,
                center: center.clone(),
                gap,
                mass,
                switch_level,
            })
        })
        .collect::<Result<_>>()?;
    let mass = cells.iter().map(|c| c.mass).sum::<S>();
    let volume = space.volume();
    let l1 = spec.value_holder_constant(tree.grid().horizon());
    let bound = (S::lit(2.0) * l1 + S::one()) * volume * eps.powf(spec.alpha);
    Ok(CertificateReport {
        eps,
        cells,
        mass,
        volume,
        bound_ratio: mass / bound,
    })
}

/// Copy of one base point's slice of a field.
fn single_base<S: Real>(value: &ValueField<S>, b: usize) -> ValueField<S> {
    value.select(&[b])
}

/// `sum_k E int |Du(t_k, x) sigma_bar|^2 dx dt` over `k < N`, with `Du` by
/// central differences across the grid (one-sided at the edges).
///
/// The field's base points must be the grid points in grid order;
/// `sigma_bar` is a row-major `d x m1` matrix.
pub fn gradient_norm<S: Real>(
    value: &ValueField<S>,
    sigma_bar: &[S],
    space: &SpatialGrid<S>,
) -> Result<S> {
    let d = space.dim();
    if space.per_axis() < 3 {
        return Err(Error::config("grid", "central differences need at least 3 points per axis"));
    }
    check_grid_bases(value, space)?;
    if sigma_bar.is_empty() || !sigma_bar.len().is_multiple_of(d) {
        return Err(Error::config("sigma_bar", format!("expected a d x m1 matrix with d = {d}")));
    }
    let m1 = sigma_bar.len() / d;
    let dt = value.grid().dt();
    let mut total = S::zero();
    for k in 0..value.steps() {
        let nodes = value.nodes(k);
        let mut per_node = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let vals: Vec<S> = (0..space.len()).map(|b| value.at_base(b, k, node)).collect();
            let sq: Vec<S> = (0..space.len())
                .map(|p| {
                    let du = grid_gradient(space, &vals, p);
                    (0..m1)
                        .map(|l| {
                            let s: S = (0..d).map(|r| du[r] * sigma_bar[r * m1 + l]).sum();
                            s * s
                        })
                        .sum()
                })
                .collect();
            per_node.push(space.integrate(&sq)?);
        }
        let mean = per_node.iter().copied().sum::<S>() / S::from_count(nodes);
        total = total + mean * dt;
    }
    Ok(total)
}

fn check_grid_bases<S: Real>(value: &ValueField<S>, space: &SpatialGrid<S>) -> Result<()> {
    if value.num_bases() != space.len() {
        return Err(Error::config(
            "base_points",
            format!("{} base points for {} grid points", value.num_bases(), space.len()),
        ));
    }
    let tol = space.spacing() * S::lit(1e-9);
    for (b, p) in value.bases().iter().zip(space.points()) {
        if b.iter().zip(p).any(|(a, c)| (*a - *c).abs() > tol) {
            return Err(Error::config("base_points", "base points must be the grid points in order"));
        }
    }
    Ok(())
}

/// Central-difference gradient of grid values at point `p`.
fn grid_gradient<S: Real>(space: &SpatialGrid<S>, vals: &[S], p: usize) -> Vec<S> {
    let d = space.dim();
    let n = space.per_axis();
    let h = space.spacing();
    let mut idx = [0usize; 2];
    let mut rest = p;
    for r in (0..d).rev() {
        idx[r] = rest % n;
        rest /= n;
    }
    let stride = |r: usize| n.pow((d - 1 - r) as u32);
    (0..d)
        .map(|r| {
            let s = stride(r);
            if idx[r] == 0 {
                (vals[p + s] - vals[p]) / h
            } else if idx[r] == n - 1 {
                (vals[p] - vals[p - s]) / h
            } else {
                (vals[p + s] - vals[p - s]) / (S::lit(2.0) * h)
            }
        })
        .collect()
}

/// Split of the martingale coefficient `Z = psi + Du sigma` along the paths
/// of a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiReport<S> {
    /// Per Wiener coordinate, `max |Z_j - (Du sigma)_j|` with `Du` by central
    /// differences across neighbouring base points.
    pub central_difference: Vec<S>,
    /// Per coordinate, `max |psi_j|` with
    /// `psi_j = E_k[u(t_{k+1}, y) dW_j] / dt` at the frozen point `y = b + X_k`.
    pub frozen_point: Vec<S>,
    /// Interior base points inspected.
    pub bases_checked: usize,
}

/// Inspects `Z` of `u(., b + X^sigma)` at every node for the interior grid
/// points of a one-dimensional grid.
pub fn psi_split<S: Real>(
    value: &ValueField<S>,
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    space: &SpatialGrid<S>,
) -> Result<PsiReport<S>> {
    if space.dim() != 1 {
        return Err(Error::Unsupported("the psi split is implemented for d = 1".into()));
    }
    if value.layout() != Layout::Tree {
        return Err(Error::Unsupported("the psi split needs a tree-layout field".into()));
    }
    check_grid_bases(value, space)?;
    let m = tree.dim();
    let h = space.spacing();
    let dt = tree.dt();
    let p = tree.transition_probability();
    let lat = value.lattice();
    let mut central = vec![S::zero(); m];
    let mut frozen = vec![S::zero(); m];
    let n_pts = space.len();
    for b in 1..n_pts.saturating_sub(1) {
        let table = sigma.resolve(tree, controls, Some(&value.bases()[b]))?;
        let idx = value.path_indices(&table)?;
        let y = value.along(b, &table)?;
        let z = tree.z_extract(&y)?;
        for (k, row) in idx.iter().enumerate().take(tree.steps()) {
            for (i, &w) in row.iter().enumerate() {
                let du = (value.get(b + 1, k, i, w) - value.get(b - 1, k, i, w)) / (S::lit(2.0) * h);
                let sig = controls.get(table.at(k, i));
                let fixed = lat.index(k + 1, &lat.offset(k, w)).expect("windows are nested");
                for j in 0..m {
                    let zj = z.get(k, i)[j];
                    central[j] = central[j].max((zj - du * sig[j]).abs());
                    let psi = (0..tree.branching())
                        .map(|c| value.get(b, k + 1, tree.child(i, c), fixed) * tree.increment(c)[j])
                        .sum::<S>()
                        * p
                        / dt;
                    frozen[j] = frozen[j].max(psi.abs());
                }
            }
        }
    }
    Ok(PsiReport {
        central_difference: central,
        frozen_point: frozen,
        bases_checked: n_pts.saturating_sub(2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::DEFAULT_NODE_BUDGET;
    use crate::problem::builtin_problem;
    use approx::assert_abs_diff_eq;

    fn tree(m: usize, n: usize) -> PathTree<f64> {
        PathTree::build(m, TimeGrid::new(1.0, n).unwrap(), DEFAULT_NODE_BUDGET).unwrap()
    }

    #[test]
    fn grid_field_interpolates_and_vanishes_outside() {
        let g = SpatialGrid::new(1, 1.0, 0.5).unwrap();
        let f = GridField::new(g, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(f.eval(&[-0.75]), 1.0);
        assert_eq!(f.eval(&[0.75]), 4.0);
        assert_abs_diff_eq!(f.eval(&[0.0]), 2.5, epsilon = 1e-15);
        assert_eq!(f.eval(&[1.5]), 0.0);
    }

    #[test]
    fn linear_solve_trivial_cases() {
        let t = tree(1, 4);
        let u = ControlSet::scalars(&[1.0]).unwrap();
        let zero = |_: usize, _: usize, _: &[f64]| 0.0;
        let one = |_: usize, _: usize, _: &[f64]| 1.0;
        let psi0 = |_: usize, _: &[f64]| 0.0;
        let s = solve_linear_shifted(&Strategy::Constant(0), &u, &zero, &psi0, &t, &[vec![0.0]]).unwrap();
        assert_eq!(s.u.root(0), 0.0);
        assert_eq!(s.z[0].max_abs(), 0.0);
        let s = solve_linear_shifted(&Strategy::Constant(0), &u, &one, &psi0, &t, &[vec![0.0]]).unwrap();
        for k in 0..=4 {
            for v in s.paths[0].level(k) {
                assert_abs_diff_eq!(*v, 1.0 - k as f64 / 4.0, epsilon = 1e-14);
            }
        }
        assert!(s.z[0].max_abs() < 1e-14);
    }

    #[test]
    fn semigroup_identity_and_horizon() {
        let t = tree(1, 4);
        let u = ControlSet::scalars(&[1.0]).unwrap();
        let f = |_: usize, y: &[f64]| (-y[0] * y[0]).exp();
        let pts = vec![vec![0.0], vec![0.4]];
        let id = semigroup_apply(&Strategy::Constant(0), &u, &f, 0.5, 0.0, &t, &pts).unwrap();
        for row in &id {
            assert_eq!(row[0], 1.0);
            assert_abs_diff_eq!(row[1], (-0.4f64 * 0.4).exp(), epsilon = 1e-15);
        }
        let past = semigroup_apply(&Strategy::Constant(0), &u, &f, 0.5, 0.75, &t, &pts).unwrap();
        assert!(past.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn penalization_of_deterministic_potential() {
        let t = tree(1, 4);
        let c = 2.0;
        let u = AdaptedProcess::from_fn(&t, 4, |nd| c * (1.0 - nd.time()));
        let dt = 0.25;
        for n in [10.0, 40.0] {
            let pen = penalize_potential(&t, &u, n).unwrap();
            // Scalar recursion.
            let mut un = 0.0;
            for k in (0..4).rev() {
                un = (un + n * dt * c * (1.0 - k as f64 * dt)) / (1.0 + n * dt);
                for v in pen.u_n.level(k) {
                    assert_abs_diff_eq!(*v, un, epsilon = 1e-14);
                }
            }
        }
        let a = penalize_potential(&t, &u, 10.0).unwrap();
        let b = penalize_potential(&t, &u, 40.0).unwrap();
        for k in 0..=4 {
            for ((x, y), z) in a.u_n.level(k).iter().zip(b.u_n.level(k)).zip(u.level(k)) {
                assert!(*x <= *y + 1e-15 && *y <= *z + 1e-15);
            }
        }
        assert!(penalize_potential(&t, &u, -1.0).is_err());
    }

    #[test]
    fn deterministic_potential_decomposition() {
        let t = tree(1, 4);
        let y = AdaptedProcess::from_fn(&t, 4, |nd| 1.0 - nd.time());
        let pts = AdaptedProcess::from_fn(&t, 4, |_| 0.0);
        let paths = PathField {
            bases: vec![vec![0.0]],
            values: vec![y],
            points: vec![pts],
        };
        let pot = decompose_potential(&t, paths, 1.0, Provenance::Envelope, 1e-12).unwrap();
        let dec = &pot.decompositions[0];
        for k in 0..=4 {
            for v in dec.increasing.level(k) {
                assert_abs_diff_eq!(*v, k as f64 / 4.0, epsilon = 1e-14);
            }
        }
        assert!(dec.coefficient.max_abs() < 1e-14);
        assert!(pot.energy.residual < 1e-14);
        let mass = measure_eval(&t, &pot, &|_, _| 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn cost_gap_energy_identity() {
        let t = tree(1, 3);
        let spec = builtin_problem::<f64>("two_control_1d").unwrap();
        let space = SpatialGrid::new(1, 1.0, 0.25).unwrap();
        let v = value_backward(&spec, &spec.controls, &t, &space.point_list()).unwrap();
        let paths = cost_gap_potential(&spec, &spec.controls, &Strategy::Constant(1), &t, &v).unwrap();
        let pot = decompose_potential(&t, paths, space.weight(), Provenance::CostGap, 1e-10).unwrap();
        assert!(pot.energy.residual <= 1e-12, "{:?}", pot.energy);
        let mass = pot.total_mass(&t);
        for (b, m) in mass.iter().enumerate() {
            assert_abs_diff_eq!(*m, pot.paths.values[b].level(0)[0], epsilon = 1e-13);
            assert!(*m > 0.0);
        }
        assert!(pot.remark_ratio(&t).is_finite());
    }

    #[test]
    fn gradient_of_linear_field() {
        let space = SpatialGrid::new(1, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let controls = ControlSet::scalars(&[1.0]).unwrap();
        let lat = ShiftLattice::new(&controls, 0.5).unwrap();
        let (a, b): (f64, f64) = (0.7, 1.5);
        let field = ValueField::tabulate(Layout::Markov, grid, 1, lat, space.point_list(), |_, _, _, y| a * y[0]);
        let g = gradient_norm(&field, &[b], &space).unwrap();
        assert_abs_diff_eq!(g, (a * b).powi(2) * 1.0 * 2.0, epsilon = 1e-10);
        let coarse = SpatialGrid::new(1, 1.0, 1.0).unwrap();
        assert!(gradient_norm(&field, &[b], &coarse).is_err());
    }
}
