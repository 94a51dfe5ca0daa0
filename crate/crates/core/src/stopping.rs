//! Snell envelopes, penalized reflected equations and the reflected
//! equation assembled from a linear part and an envelope.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::control::{decision_nodes, ControlSet, OpenLoop, Strategy};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, PathTree, PotentialDecomposition};
use crate::potential::{decompose_potential, solve_linear_shifted, LinearSolution, PathField, Provenance, RegularPotential};
use crate::problem::ObservedPath;
use crate::scalar::Real;
use crate::value::{Choice, Sweep, ValueField};

/// `(k, node, y) -> value`.
pub type NodeField<S> = Arc<dyn Fn(usize, usize, &[S]) -> S + Send + Sync>;
/// `(leaf, y) -> value`.
pub type LeafField<S> = Arc<dyn Fn(usize, &[S]) -> S + Send + Sync>;

/// Cap on labelings tried by [`stopping_rule_oracle`].
pub const DEFAULT_STOPPING_BUDGET: usize = 1 << 10;

/// Obstacle `xi` and, for the reflected problem, running field `H` and
/// terminal field `Psi`.
#[derive(Clone)]
pub struct ObstacleSpec<S> {
    pub xi: NodeField<S>,
    pub running: NodeField<S>,
    pub terminal: LeafField<S>,
}

impl<S> std::fmt::Debug for ObstacleSpec<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ObstacleSpec { .. }")
    }
}

impl<S: Real> ObstacleSpec<S> {
    /// Pure stopping problem: `H = 0`, `Psi = 0`.
    pub fn stopping(xi: NodeField<S>) -> Self {
        Self {
            xi,
            running: Arc::new(|_, _, _| S::zero()),
            terminal: Arc::new(|_, _| S::zero()),
        }
    }

    pub fn reflected(xi: NodeField<S>, running: NodeField<S>, terminal: LeafField<S>) -> Self {
        Self { xi, running, terminal }
    }

    /// `(xi + c, H, Psi + c)`.
    pub fn shifted(&self, c: S) -> Self {
        let xi = self.xi.clone();
        let psi = self.terminal.clone();
        Self {
            xi: Arc::new(move |k, i, y| xi(k, i, y) + c),
            running: self.running.clone(),
            terminal: Arc::new(move |i, y| psi(i, y) + c),
        }
    }
}

/// Obstacle with independent uniform node values on `[-scale, scale]`,
/// damped by `exp(-|y|^2 / 2)`, and nonpositive at the horizon.
pub fn random_obstacle<S: Real>(tree: &PathTree<S>, seed: u64, scale: S) -> NodeField<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tree.steps();
    let table: Vec<Vec<S>> = (0..=n)
        .map(|k| {
            (0..tree.level_len(k))
                .map(|_| {
                    let v = S::lit(rng.gen_range(-1.0..1.0)) * scale;
                    if k == n {
                        -v.abs()
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Arc::new(move |k, i, y| {
        let r2: S = y.iter().map(|v| *v * *v).sum();
        table[k][i] * (-r2 / S::lit(2.0)).exp()
    })
}

fn terminal_violation<S: Real>(depth: usize, xi: &AdaptedProcess<S>) -> Result<()> {
    let worst = xi.level(depth).iter().copied().fold(S::neg_infinity(), S::max);
    if worst > S::zero() {
        return Err(Error::Obstacle(format!("obstacle is positive at the horizon (max {worst})")));
    }
    Ok(())
}

/// `E_N = 0`, `E_k = max(xi_k, E_k[E_{k+1}])` for an obstacle process.
pub fn snell_envelope<S: Real>(tree: &PathTree<S>, xi: &AdaptedProcess<S>) -> Result<AdaptedProcess<S>> {
    xi.check_shape(tree)?;
    let n = xi.depth();
    terminal_violation(n, xi)?;
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = vec![S::zero(); tree.level_len(n)];
    for k in (0..n).rev() {
        let e = tree.step_expectation(&levels[k + 1], 1, k);
        levels[k] = e.iter().zip(xi.level(k)).map(|(e, x)| x.max(*e)).collect();
    }
    Ok(AdaptedProcess::new(1, levels))
}

/// `max` over stop/continue labelings of the nonterminal nodes of
/// `E_k[xi_tau 1_{tau < T}]`, `tau` the first stop label at or after `k`.
pub fn stopping_rule_oracle<S: Real>(
    tree: &PathTree<S>,
    xi: &AdaptedProcess<S>,
    budget: usize,
) -> Result<AdaptedProcess<S>> {
    xi.check_shape(tree)?;
    let n = xi.depth();
    terminal_violation(n, xi)?;
    let nodes = decision_nodes(tree);
    if nodes >= usize::BITS as usize || (1usize << nodes) > budget {
        return Err(Error::Size {
            what: "stopping rules".into(),
            count: format!("2^{nodes} stopping rules"),
            budget,
        });
    }
    let mut best: Vec<Vec<S>> = (0..=n).map(|k| vec![S::neg_infinity(); tree.level_len(k)]).collect();
    let mut values: Vec<Vec<S>> = (0..=n).map(|k| vec![S::zero(); tree.level_len(k)]).collect();
    for labels in 0u64..(1u64 << nodes) {
        let mut bit = 0;
        let mut starts = vec![0usize; n];
        for (k, s) in starts.iter_mut().enumerate() {
            *s = bit;
            bit += tree.level_len(k);
        }
        for k in (0..n).rev() {
            let e = tree.step_expectation(&values[k + 1], 1, k);
            for (i, v) in values[k].iter_mut().enumerate() {
                let stop = labels >> (starts[k] + i) & 1 == 1;
                *v = if stop { xi.level(k)[i] } else { e[i] };
            }
        }
        for k in 0..=n {
            for (b, v) in best[k].iter_mut().zip(&values[k]) {
                *b = b.max(*v);
            }
        }
    }
    Ok(AdaptedProcess::new(1, best))
}

fn check_penalty<S: Real>(n: S) -> Result<()> {
    if !(n > S::zero()) || !n.is_finite() {
        return Err(Error::config("n", format!("penalty must be positive and finite, got {n}")));
    }
    Ok(())
}

#[inline]
fn penalized_step<S: Real>(e: S, xi: S, ndt: S) -> S {
    if e >= xi {
        e
    } else {
        (e + ndt * xi) / (S::one() + ndt)
    }
}

/// Implicit penalization of the envelope of an obstacle process.
pub fn penalized_envelope<S: Real>(tree: &PathTree<S>, xi: &AdaptedProcess<S>, n: S) -> Result<AdaptedProcess<S>> {
    check_penalty(n)?;
    xi.check_shape(tree)?;
    let depth = xi.depth();
    terminal_violation(depth, xi)?;
    let ndt = n * tree.dt();
    let mut levels = vec![Vec::new(); depth + 1];
    levels[depth] = vec![S::zero(); tree.level_len(depth)];
    for k in (0..depth).rev() {
        let e = tree.step_expectation(&levels[k + 1], 1, k);
        levels[k] = e.iter().zip(xi.level(k)).map(|(e, x)| penalized_step(*e, *x, ndt)).collect();
    }
    Ok(AdaptedProcess::new(1, levels))
}

/// `E sum_k (u_k - xi_k) dK_k` over levels below the horizon.
pub fn skorohod_residual<S: Real>(
    tree: &PathTree<S>,
    u: &AdaptedProcess<S>,
    xi: &AdaptedProcess<S>,
    dec: &PotentialDecomposition<S>,
) -> S {
    (0..dec.depth())
        .map(|k| {
            let terms: Vec<S> = u
                .level(k)
                .iter()
                .zip(xi.level(k))
                .zip(dec.increments.level(k))
                .map(|((u, x), dk)| (*u - *x) * *dk)
                .collect();
            tree.mean(&terms)
        })
        .sum()
}

fn resolve_all<S: Real>(
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<Vec<OpenLoop>> {
    bases.iter().map(|b| sigma.resolve(tree, controls, Some(b))).collect()
}

/// Obstacle at every node along the paths of one base point.
fn obstacle_along<S: Real>(
    xi: &NodeField<S>,
    field: &ValueField<S>,
    b: usize,
    table: &OpenLoop,
) -> Result<AdaptedProcess<S>> {
    let pts = field.along_points(b, table)?;
    let d = pts.width();
    let levels = pts
        .levels()
        .iter()
        .enumerate()
        .map(|(k, row)| row.chunks(d).enumerate().map(|(i, y)| xi(k, i, y)).collect())
        .collect();
    Ok(AdaptedProcess::new(1, levels))
}

/// Largest obstacle value over the level-`N` lattice window of every base.
fn check_terminal_field<S: Real>(
    field: &ValueField<S>,
    bound: &dyn Fn(usize, usize, &[S]) -> S,
) -> Result<()> {
    let n = field.steps();
    for b in 0..field.num_bases() {
        for node in 0..field.nodes(n) {
            for w in 0..field.window_len(n) {
                let y = field.point(b, n, w);
                let v = bound(b, node, &y);
                if v > S::zero() {
                    return Err(Error::Obstacle(format!(
                        "terminal inequality fails by {v} at base {b}, leaf {node}, y = {y:?}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Output of [`snell_backward`].
#[derive(Debug, Clone)]
pub struct Snell<S> {
    /// Envelope on the lattice windows around each base point.
    pub field: ValueField<S>,
    /// Envelope along the paths of `sigma`, with its Doob-Meyer split.
    pub potential: RegularPotential<S>,
    pub obstacle: Vec<AdaptedProcess<S>>,
    /// Per base point, `E sum (E_k - xi_k) dK_k`.
    pub skorohod: Vec<S>,
}

/// Post-map that also sees the base index.
type BasePost<'a, S> = dyn Fn(usize, usize, usize, usize, &[S], S) -> S + Sync + 'a;

fn sweep_nonlinear<S: Real>(
    tree: &PathTree<S>,
    controls: &ControlSet<S>,
    bases: &[Vec<S>],
    tables: &[OpenLoop],
    post: &BasePost<'_, S>,
    terminal: &(dyn Fn(usize, &[S]) -> S + Sync),
) -> Result<ValueField<S>> {
    let sweep = Sweep::tree(tree, controls, 0)?;
    let f = |_: usize, _: usize, _: &[S], _: usize, _: &ObservedPath<'_, S>| S::zero();
    let g = |i: usize, y: &[S], _: &ObservedPath<'_, S>| terminal(i, y);
    let runs = (0..bases.len())
        .into_par_iter()
        .map(|b| {
            let p = |k: usize, node: usize, w: usize, y: &[S], e: S| post(b, k, node, w, y, e);
            sweep.run_with(&bases[b], &Choice::Table(&tables[b]), &f, &g, false, Some(&p))
        })
        .collect();
    Ok(sweep.into_field(bases.to_vec(), runs))
}

/// Snell envelope of `xi(t, x + X^sigma)` for every base point.
pub fn snell_backward<S: Real>(
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    obstacle: &ObstacleSpec<S>,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<Snell<S>> {
    let tables = resolve_all(sigma, controls, tree, bases)?;
    let xi = obstacle.xi.clone();
    let post = move |_: usize, k: usize, node: usize, _: usize, y: &[S], e: S| xi(k, node, y).max(e);
    let field = sweep_nonlinear(tree, controls, bases, &tables, &post, &|_, _| S::zero())?;
    check_terminal_field(&field, &|_, node, y| (obstacle.xi)(tree.steps(), node, y))?;
    let mut values = Vec::with_capacity(bases.len());
    let mut points = Vec::with_capacity(bases.len());
    let mut xis = Vec::with_capacity(bases.len());
    for (b, t) in tables.iter().enumerate() {
        values.push(field.along(b, t)?);
        points.push(field.along_points(b, t)?);
        xis.push(obstacle_along(&obstacle.xi, &field, b, t)?);
    }
    let paths = PathField {
        bases: bases.to_vec(),
        values,
        points,
    };
    let potential = decompose_potential(tree, paths, S::one(), Provenance::Envelope, S::lit(1e-10))?;
    let skorohod = potential
        .decompositions
        .iter()
        .zip(&potential.paths.values)
        .zip(&xis)
        .map(|((d, u), x)| skorohod_residual(tree, u, x, d))
        .collect();
    Ok(Snell {
        field,
        potential,
        obstacle: xis,
        skorohod,
    })
}

/// Penalized envelope on the lattice windows: the backward step
/// `u = e` if `e >= xi`, else `(e + n dt xi) / (1 + n dt)`.
pub fn snell_penalized<S: Real>(
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    obstacle: &ObstacleSpec<S>,
    n: S,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<ValueField<S>> {
    check_penalty(n)?;
    let tables = resolve_all(sigma, controls, tree, bases)?;
    let ndt = n * tree.dt();
    let xi = obstacle.xi.clone();
    let post = move |_: usize, k: usize, node: usize, _: usize, y: &[S], e: S| penalized_step(e, xi(k, node, y), ndt);
    let field = sweep_nonlinear(tree, controls, bases, &tables, &post, &|_, _| S::zero())?;
    check_terminal_field(&field, &|_, node, y| (obstacle.xi)(tree.steps(), node, y))?;
    Ok(field)
}

/// Output of [`reflected_bspde_solve`].
#[derive(Debug, Clone)]
pub struct ReflectedSolution<S> {
    /// `u = u_lin + u_hat` on the lattice windows.
    pub u: ValueField<S>,
    /// Linear part with running field `H` and terminal field `Psi`.
    pub linear: LinearSolution<S>,
    /// `u_hat` along the paths, the envelope of `xi - u_lin`.
    pub correction: RegularPotential<S>,
    /// `Z` of `u` along the paths: linear part plus the envelope's coefficient.
    pub z: Vec<AdaptedProcess<S>>,
    /// Per base point, `E sum (u_k - xi_k) dK_k`.
    pub skorohod: Vec<S>,
    /// `min (u - xi)` over every stored lattice entry.
    pub min_excess: S,
}

/// Reflected equation split as a linear solve plus a Snell envelope.
pub fn reflected_bspde_solve<S: Real>(
    sigma: &Strategy<S>,
    controls: &ControlSet<S>,
    obstacle: &ObstacleSpec<S>,
    tree: &PathTree<S>,
    bases: &[Vec<S>],
) -> Result<ReflectedSolution<S>> {
    let tables = resolve_all(sigma, controls, tree, bases)?;
    let linear = solve_linear_shifted(sigma, controls, &*obstacle.running, &*obstacle.terminal, tree, bases)?;
    let lin = &linear.u;
    check_terminal_field(lin, &|_, node, y| (obstacle.xi)(tree.steps(), node, y) - (obstacle.terminal)(node, y))?;
    let xi = obstacle.xi.clone();
    let post = |b: usize, k: usize, node: usize, w: usize, y: &[S], e: S| (xi(k, node, y) - lin.get(b, k, node, w)).max(e);
    let hat = sweep_nonlinear(tree, controls, bases, &tables, &post, &|_, _| S::zero())?;
    let u = lin.zip_with(&hat, |a, c| a + c)?;
    let mut values = Vec::with_capacity(bases.len());
    let mut points = Vec::with_capacity(bases.len());
    let mut z = Vec::with_capacity(bases.len());
    let mut xis = Vec::with_capacity(bases.len());
    for (b, t) in tables.iter().enumerate() {
        values.push(hat.along(b, t)?);
        points.push(hat.along_points(b, t)?);
        xis.push(obstacle_along(&obstacle.xi, &u, b, t)?);
    }
    let paths = PathField {
        bases: bases.to_vec(),
        values,
        points,
    };
    let correction = decompose_potential(tree, paths, S::one(), Provenance::Envelope, S::lit(1e-10))?;
    let mut skorohod = Vec::with_capacity(bases.len());
    for (b, t) in tables.iter().enumerate() {
        let dec = &correction.decompositions[b];
        let zb = linear.z[b].zip_with(&dec.coefficient, |a, c| a + c);
        z.push(zb);
        let ub = u.along(b, t)?;
        skorohod.push(skorohod_residual(tree, &ub, &xis[b], dec));
    }
    let mut min_excess = S::infinity();
    for b in 0..bases.len() {
        for k in 0..=u.steps() {
            for node in 0..u.nodes(k) {
                for w in 0..u.window_len(k) {
                    let y = u.point(b, k, w);
                    min_excess = min_excess.min(u.get(b, k, node, w) - (obstacle.xi)(k, node, &y));
                }
            }
        }
    }
    Ok(ReflectedSolution {
        u,
        linear,
        correction,
        z,
        skorohod,
        min_excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{TimeGrid, DEFAULT_NODE_BUDGET};
    use approx::assert_abs_diff_eq;

    fn tree(m: usize, n: usize) -> PathTree<f64> {
        PathTree::build(m, TimeGrid::new(1.0, n).unwrap(), DEFAULT_NODE_BUDGET).unwrap()
    }

    fn unit() -> ControlSet<f64> {
        ControlSet::scalars(&[1.0]).unwrap()
    }

    fn linear_in_time(t: &PathTree<f64>, c: f64) -> NodeField<f64> {
        let dt = t.dt();
        let n = t.steps();
        Arc::new(move |k, _, _| c * (n - k) as f64 * dt)
    }

    #[test]
    fn nonpositive_obstacle_never_stops() {
        let t = tree(1, 3);
        let obs = ObstacleSpec::stopping(Arc::new(|_, _, y: &[f64]| -1.0 - y[0].abs()));
        let s = snell_backward(&Strategy::Constant(0), &unit(), &obs, &t, &[vec![0.0], vec![0.5]]).unwrap();
        assert_eq!(s.potential.paths.values[0].max_abs(), 0.0);
        let p = snell_penalized(&Strategy::Constant(0), &unit(), &obs, 8.0, &t, &[vec![0.0]]).unwrap();
        assert_eq!(p.root(0), 0.0);
    }

    #[test]
    fn supermartingale_obstacle_is_its_own_envelope() {
        let t = tree(1, 4);
        let obs = ObstacleSpec::stopping(linear_in_time(&t, 2.0));
        let s = snell_backward(&Strategy::Constant(0), &unit(), &obs, &t, &[vec![0.0]]).unwrap();
        for k in 0..=4 {
            for v in s.potential.paths.values[0].level(k) {
                assert_abs_diff_eq!(*v, 2.0 * (1.0 - k as f64 / 4.0), epsilon = 1e-12);
            }
        }
        assert!(s.skorohod[0].abs() <= 1e-12);
    }

    #[test]
    fn envelope_matches_stopping_rule_enumeration() {
        let t = tree(1, 3);
        for seed in 0..10 {
            let obs = ObstacleSpec::stopping(random_obstacle(&t, seed, 1.0));
            let s = snell_backward(&Strategy::Constant(0), &unit(), &obs, &t, &[vec![0.3]]).unwrap();
            let oracle = stopping_rule_oracle(&t, &s.obstacle[0], DEFAULT_STOPPING_BUDGET).unwrap();
            let diff = oracle.zip_with(&s.potential.paths.values[0], |a, b| a - b).max_abs();
            assert!(diff <= 1e-12, "seed {seed}: {diff}");
            assert!(s.skorohod[0].abs() <= 1e-10);
        }
    }

    #[test]
    fn terminal_violation_is_an_obstacle_error() {
        let t = tree(1, 2);
        let obs = ObstacleSpec::stopping(Arc::new(|_, _, _: &[f64]| 1.0));
        assert!(matches!(
            snell_backward(&Strategy::Constant(0), &unit(), &obs, &t, &[vec![0.0]]),
            Err(Error::Obstacle(_))
        ));
        let xi = AdaptedProcess::from_fn(&t, 2, |_| 1.0);
        assert!(stopping_rule_oracle(&t, &xi, 1 << 10).is_err());
    }

    #[test]
    fn penalization_rises_to_the_envelope() {
        let t = tree(1, 8);
        let c = 1.5;
        let obs = ObstacleSpec::stopping(linear_in_time(&t, c));
        let p = snell_penalized(&Strategy::Constant(0), &unit(), &obs, 4096.0, &t, &[vec![0.0]]).unwrap();
        assert!((p.root(0) - c).abs() <= 1e-3 * c);
        let t3 = tree(1, 3);
        let obs = ObstacleSpec::stopping(random_obstacle(&t3, 3, 1.0));
        let env = snell_backward(&Strategy::Constant(0), &unit(), &obs, &t3, &[vec![0.0]]).unwrap();
        let mut prev: Option<ValueField<f64>> = None;
        for e in 4..=12 {
            let n = (1u32 << e) as f64;
            let u = snell_penalized(&Strategy::Constant(0), &unit(), &obs, n, &t3, &[vec![0.0]]).unwrap();
            for k in 0..=3 {
                for (a, b) in u.level(0, k).iter().zip(env.field.level(0, k)) {
                    assert!(*a <= *b + 1e-12);
                }
                if let Some(q) = &prev {
                    for (a, b) in q.level(0, k).iter().zip(u.level(0, k)) {
                        assert!(*a <= *b + 1e-12);
                    }
                }
            }
            prev = Some(u);
        }
        assert!(snell_penalized(&Strategy::Constant(0), &unit(), &obs, -1.0, &t3, &[vec![0.0]]).is_err());
    }

    #[test]
    fn reflected_trivial_cases() {
        let t = tree(1, 3);
        let far = ObstacleSpec::reflected(
            Arc::new(|_, _, _: &[f64]| -1e6),
            Arc::new(|_, _, _: &[f64]| 1.0),
            Arc::new(|_, _: &[f64]| 0.0),
        );
        let r = reflected_bspde_solve(&Strategy::Constant(0), &unit(), &far, &t, &[vec![0.0]]).unwrap();
        assert_abs_diff_eq!(r.u.root(0), 1.0, epsilon = 1e-12);
        assert_eq!(r.correction.total_mass(&t)[0], 0.0);
        assert!(r.u.max_abs_diff(&r.linear.u).unwrap() <= 1e-12);

        let c = 0.8;
        let lin = ObstacleSpec::reflected(
            linear_in_time(&t, c),
            Arc::new(|_, _, _: &[f64]| 0.0),
            Arc::new(|_, _: &[f64]| 0.0),
        );
        let r = reflected_bspde_solve(&Strategy::Constant(0), &unit(), &lin, &t, &[vec![0.0]]).unwrap();
        assert_abs_diff_eq!(r.u.root(0), c, epsilon = 1e-12);
        assert_abs_diff_eq!(r.correction.total_mass(&t)[0], c, epsilon = 1e-12);
    }

    #[test]
    fn reflected_binding_obstacle() {
        let t = tree(1, 4);
        let xi = random_obstacle(&t, 11, 1.2);
        let obs = ObstacleSpec::reflected(
            xi,
            Arc::new(|_, _, _: &[f64]| 0.0),
            Arc::new(|_, y: &[f64]| (-y[0] * y[0] / 2.0).exp()),
        );
        let bases = vec![vec![-0.5], vec![0.0], vec![0.5]];
        let r = reflected_bspde_solve(&Strategy::Constant(0), &unit(), &obs, &t, &bases).unwrap();
        assert!(r.min_excess >= -1e-12);
        assert!(r.skorohod.iter().all(|s| s.abs() <= 1e-10));
        assert!(r.correction.total_mass(&t).iter().any(|m| *m > 1e-3));
        let shifted = reflected_bspde_solve(&Strategy::Constant(0), &unit(), &obs.shifted(0.25), &t, &bases).unwrap();
        let back = shifted.u.zip_with(&r.u, |a, b| a - 0.25 - b).unwrap();
        assert!(back.max_abs_diff(&back.zip_with(&back, |_, _| 0.0).unwrap()).unwrap() <= 1e-12);
    }
}
