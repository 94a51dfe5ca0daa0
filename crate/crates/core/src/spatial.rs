//! Truncated-box midpoint quadrature standing in for `L^2(R^d)` norms and
//! `dx`-integrals.

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, PathTree};
use crate::scalar::Real;

/// Uniform midpoint grid on `[-R, R]^d` with weights `h^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid<S> {
    dim: usize,
    radius: S,
    spacing: S,
    per_axis: usize,
    points: Vec<S>,
}

impl<S: Real> SpatialGrid<S> {
    pub fn new(dim: usize, radius: S, spacing: S) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::config("d", format!("spatial dimension must be 1 or 2, got {dim}")));
        }
        if !(radius > S::zero()) || !(spacing > S::zero()) {
            return Err(Error::config("radius/spacing", "must both be positive"));
        }
        let ratio = S::lit(2.0) * radius / spacing;
        let n = ratio.round();
        if (ratio - n).abs() > S::lit(1e-9) * ratio || n < S::one() {
            return Err(Error::config(
                "spacing",
                format!("2R/h = {ratio} must be a positive integer"),
            ));
        }
        let per_axis = n.to_usize().unwrap_or(0);
        let axis: Vec<S> = (0..per_axis)
            .map(|i| -radius + (S::from_count(i) + S::lit(0.5)) * spacing)
            .collect();
        let mut points = Vec::with_capacity(per_axis.pow(dim as u32) * dim);
        if dim == 1 {
            points.extend_from_slice(&axis);
        } else {
            for a in &axis {
                for b in &axis {
                    points.push(*a);
                    points.push(*b);
                }
            }
        }
        Ok(Self {
            dim,
            radius,
            spacing,
            per_axis,
            points,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> S {
        self.radius
    }

    pub fn spacing(&self) -> S {
        self.spacing
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[S] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[S]> {
        self.points.chunks(self.dim)
    }

    /// Owned copies of the points, the layout the engines take base points in.
    pub fn point_list(&self) -> Vec<Vec<S>> {
        self.points().map(|p| p.to_vec()).collect()
    }

    pub fn weight(&self) -> S {
        self.spacing.powi(self.dim as i32)
    }

    pub fn volume(&self) -> S {
        (S::lit(2.0) * self.radius).powi(self.dim as i32)
    }

    /// Quadrature of values given at the grid points.
    pub fn integrate(&self, values: &[S]) -> Result<S> {
        if self.is_empty() {
            return Err(Error::config("grid", "empty spatial grid"));
        }
        if values.len() != self.len() {
            return Err(Error::config(
                "field",
                format!("{} values for {} grid points", values.len(), self.len()),
            ));
        }
        Ok(values.iter().copied().sum::<S>() * self.weight())
    }

    pub fn integrate_fn(&self, f: impl Fn(&[S]) -> S) -> Result<S> {
        let values: Vec<S> = self.points().map(f).collect();
        self.integrate(&values)
    }

    /// Tail mass `int_{|x|_inf > R} g^2 dx`, estimated on the shell out to
    /// `R + width` with the same spacing.
    pub fn tail_bound(&self, width: S, g: impl Fn(&[S]) -> S) -> Result<S> {
        let outer = SpatialGrid::new(self.dim, self.radius + width, self.spacing)?;
        let mut acc = S::zero();
        for p in outer.points() {
            if p.iter().any(|c| c.abs() > self.radius) {
                let v = g(p);
                acc = acc + v * v;
            }
        }
        Ok(acc * outer.weight())
    }
}

/// Square root of the weighted sum of squares.
pub fn l2_norm<S: Real>(values: &[S], grid: &SpatialGrid<S>) -> Result<S> {
    let sq: Vec<S> = values.iter().map(|v| *v * *v).collect();
    Ok(grid.integrate(&sq)?.sqrt())
}

pub fn l2_norm_fn<S: Real>(f: impl Fn(&[S]) -> S, grid: &SpatialGrid<S>) -> Result<S> {
    let values: Vec<S> = grid.points().map(f).collect();
    l2_norm(&values, grid)
}

/// The three sides of the shifted-norm equivalence for a deterministic field
/// `h(t_k, x)` transported along controlled states `X` (width `d`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEquivalence<S> {
    /// `E sum_k ||h(t_k, . + X_k)||^2 dt`.
    pub shifted: S,
    /// `sum_k ||h(t_k, .)||^2 dt`.
    pub unshifted: S,
    /// `T * int E sup_k |h(t_k, x + X_k)|^2 dx`.
    pub sup_bound: S,
}

pub fn norm_equivalence<S: Real>(
    tree: &PathTree<S>,
    state: &AdaptedProcess<S>,
    grid: &SpatialGrid<S>,
    h: impl Fn(S, &[S]) -> S,
) -> Result<NormEquivalence<S>> {
    let d = grid.dim();
    if state.width() != d {
        return Err(Error::config("state", "controlled state width must match the grid dimension"));
    }
    let steps = tree.steps();
    let dt = tree.dt();
    let w = grid.weight();
    let mut y = vec![S::zero(); d];
    // Per-leaf running sup, averaged over leaves at the end.
    let leaves = tree.level_len(steps);
    let mut sup_acc = S::zero();
    let mut shifted = S::zero();
    let mut unshifted = S::zero();
    for k in 0..steps {
        let t = tree.grid().time(k);
        let sq_at: Vec<S> = (0..tree.level_len(k))
            .map(|i| {
                let x = state.get(k, i);
                let mut acc = S::zero();
                for p in grid.points() {
                    for j in 0..d {
                        y[j] = p[j] + x[j];
                    }
                    let v = h(t, &y);
                    acc = acc + v * v;
                }
                acc * w
            })
            .collect();
        shifted = shifted + tree.mean(&sq_at) * dt;
        unshifted = unshifted + l2_norm_fn(|p| h(t, p), grid)?.powi(2) * dt;
    }
    for p in grid.points() {
        let mut per_leaf = vec![S::zero(); leaves];
        for (leaf, best) in per_leaf.iter_mut().enumerate() {
            for k in 0..steps {
                let i = tree.ancestor(steps, leaf, k);
                let x = state.get(k, i);
                for j in 0..d {
                    y[j] = p[j] + x[j];
                }
                let v = h(tree.grid().time(k), &y);
                *best = best.max(v * v);
            }
        }
        sup_acc = sup_acc + tree.mean(&per_leaf);
    }
    Ok(NormEquivalence {
        shifted,
        unshifted,
        sup_bound: tree.grid().horizon() * sup_acc * w,
    })
}
