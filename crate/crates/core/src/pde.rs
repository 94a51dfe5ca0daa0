//! Explicit monotone finite differences for the deterministic HJB equation
//! of Markovian problems, and the closed-form Gaussian benchmark.

use rayon::prelude::*;

use crate::control::ControlSet;
use crate::error::{Error, Result};
use crate::problem::{CostSpec, ObservedPath};
use crate::scalar::Real;

/// Nodes per side of the Gaussian quadrature used for boundary data.
const QUADRATURE_HALF: usize = 200;
/// Quadrature range in standard deviations.
const QUADRATURE_SPAN: f64 = 8.0;
/// Time nodes for the running-cost part of boundary data.
const BOUNDARY_TIME_NODES: usize = 16;

/// `(1 + a^2 (T - t))^{-1/2} exp(-x^2 / (2 (1 + a^2 (T - t))))`.
pub fn gaussian_reference<S: Real>(t: S, x: S, horizon: S, a: S) -> S {
    let s = S::one() + a * a * (horizon - t);
    (-x * x / (S::lit(2.0) * s)).exp() / s.sqrt()
}

/// Grid, time step and control set of the explicit scheme on `[-R, R]`.
#[derive(Debug, Clone)]
pub struct FdScheme<S> {
    pub radius: S,
    pub spacing: S,
    pub horizon: S,
    pub steps: usize,
    pub controls: ControlSet<S>,
    /// Store every `stride`-th time level (the first and last always).
    pub stride: usize,
}

impl<S: Real> FdScheme<S> {
    pub fn new(radius: S, spacing: S, horizon: S, steps: usize, controls: ControlSet<S>) -> Result<Self> {
        let scheme = Self {
            radius,
            spacing,
            horizon,
            steps,
            controls,
            stride: 1,
        };
        scheme.points()?;
        Ok(scheme)
    }

    /// Fewest steps satisfying the stability bound.
    pub fn with_cfl_steps(radius: S, spacing: S, horizon: S, controls: ControlSet<S>) -> Result<Self> {
        let probe = Self::new(radius, spacing, horizon, 1, controls)?;
        let bound = probe.cfl_bound();
        let steps = (horizon / bound).ceil().to_usize().unwrap_or(1).max(1);
        Self {
            steps,
            ..probe
        }
        .checked()
    }

    fn checked(self) -> Result<Self> {
        self.check_cfl()?;
        Ok(self)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn dt(&self) -> S {
        self.horizon / S::from_count(self.steps)
    }

    /// `h^2 / (d max |sigma sigma'|)`.
    pub fn cfl_bound(&self) -> S {
        let a = self.max_diffusion();
        if a == S::zero() {
            S::infinity()
        } else {
            self.spacing * self.spacing / (S::from_count(self.controls.d()) * a)
        }
    }

    fn max_diffusion(&self) -> S {
        (0..self.controls.len())
            .map(|u| diffusion(&self.controls, u))
            .fold(S::zero(), S::max)
    }

    pub fn check_cfl(&self) -> Result<()> {
        let dt = self.dt();
        let bound = self.cfl_bound();
        if dt > bound * (S::one() + S::snap_tolerance()) {
            return Err(Error::Cfl {
                dt: dt.as_f64(),
                bound: bound.as_f64(),
            });
        }
        Ok(())
    }

    /// Symmetric nodes `-R, -R + h, ..., R`.
    pub fn points(&self) -> Result<Vec<S>> {
        if !(self.spacing > S::zero()) || !(self.radius > S::zero()) {
            return Err(Error::config("grid", "radius and spacing must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "need at least one time step"));
        }
        let cells = S::lit(2.0) * self.radius / self.spacing;
        let n = cells.round();
        if (cells - n).abs() > S::lit(1e-9) * cells {
            return Err(Error::config("grid.h", "2R must be a multiple of h"));
        }
        let n = n.to_usize().unwrap_or(0);
        if n < 2 {
            return Err(Error::config("grid.h", "need at least one interior node"));
        }
        Ok((0..=n).map(|j| -self.radius + S::from_count(j) * self.spacing).collect())
    }
}

fn diffusion<S: Real>(controls: &ControlSet<S>, u: usize) -> S {
    controls.get(u).iter().map(|v| *v * *v).sum()
}

/// Stored time levels of an FD solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSolution<S> {
    pub x: Vec<S>,
    pub times: Vec<S>,
    /// `values[level][j]`, aligned with `times`.
    pub values: Vec<Vec<S>>,
}

impl<S: Real> FdSolution<S> {
    /// Linear interpolation in `x` at a stored time.
    pub fn eval(&self, t: S, x: S) -> Result<S> {
        let tol = S::lit(1e-9) * (S::one() + t.abs());
        let level = self
            .times
            .iter()
            .position(|s| (*s - t).abs() <= tol)
            .ok_or(Error::OffGrid {
                time: t.as_f64(),
                dt: self.times.get(1).map(|s| (*s - self.times[0]).as_f64()).unwrap_or(0.0),
            })?;
        let row = &self.values[level];
        let h = self.x[1] - self.x[0];
        let s = (x - self.x[0]) / h;
        if s < S::zero() || s > S::from_count(self.x.len() - 1) {
            return Err(Error::config("x", format!("{x} lies outside the grid")));
        }
        let j = s.floor().to_usize().unwrap_or(0).min(self.x.len() - 2);
        let w = s - S::from_count(j);
        Ok(row[j] * (S::one() - w) + row[j + 1] * w)
    }

    pub fn initial(&self) -> &[S] {
        &self.values[0]
    }
}

/// `E[phi(x + sqrt(var) Z)]` by the trapezoid rule on `[-8, 8]` standard
/// deviations.
fn gaussian_expect<S: Real>(phi: &dyn Fn(S) -> S, x: S, var: S) -> S {
    if var <= S::zero() {
        return phi(x);
    }
    let sd = var.sqrt();
    let span = S::lit(QUADRATURE_SPAN);
    let dz = span / S::from_count(QUADRATURE_HALF);
    let norm = S::one() / (S::lit(2.0) * S::lit(std::f64::consts::PI)).sqrt();
    let mut acc = S::zero();
    for i in 0..=2 * QUADRATURE_HALF {
        let z = -span + S::from_count(i) * dz;
        let w = if i == 0 || i == 2 * QUADRATURE_HALF { S::lit(0.5) } else { S::one() };
        acc = acc + w * phi(x + sd * z) * (-z * z / S::lit(2.0)).exp();
    }
    acc * dz * norm
}

/// Frozen-control value at `(t, x)` for `d = 1`: heat extension of `G`
/// plus the running cost along the same Gaussian law.
fn frozen_control_value<S: Real>(spec: &CostSpec<S>, controls: &ControlSet<S>, u: usize, t: S, x: S, horizon: S) -> S {
    let a = diffusion(controls, u);
    let obs = ObservedPath::deterministic(0);
    let g = |y: S| spec.g_terminal(&[y], &obs);
    let mut v = gaussian_expect(&g, x, a * (horizon - t));
    let rest = horizon - t;
    if rest > S::zero() {
        let ds = rest / S::from_count(BOUNDARY_TIME_NODES);
        let sigma = controls.get(u);
        for i in 0..BOUNDARY_TIME_NODES {
            let s = t + (S::from_count(i) + S::lit(0.5)) * ds;
            let f = |y: S| spec.f(s, &[y], sigma, &obs);
            v = v + gaussian_expect(&f, x, a * (s - t)) * ds;
        }
    }
    v
}

/// Backward explicit sweep
/// `u_k(x) = min_sigma [u_{k+1}(x) + dt (a_sigma D2_h u_{k+1}(x) / 2 + f(t_k, x, sigma))]`
/// with Dirichlet data from the cheapest frozen control.
pub fn hjb_fd_solve<S: Real>(spec: &CostSpec<S>, scheme: &FdScheme<S>) -> Result<FdSolution<S>> {
    if !spec.is_markovian() {
        return Err(Error::Unsupported(format!(
            "problem `{}` depends on the observed path; the finite-difference reference needs m0 = 0",
            spec.name
        )));
    }
    if spec.d != 1 || scheme.controls.d() != 1 {
        return Err(Error::Unsupported("the finite-difference reference is implemented for d = 1".into()));
    }
    spec.check_compatible(&scheme.controls, spec.m)?;
    let x = scheme.points()?;
    scheme.check_cfl()?;
    let dt = scheme.dt();
    let h2 = scheme.spacing * scheme.spacing;
    let controls = &scheme.controls;
    let nu = controls.len();
    let half_a: Vec<S> = (0..nu).map(|u| diffusion(controls, u) / S::lit(2.0)).collect();
    let obs = ObservedPath::deterministic(0);
    let n = scheme.steps;
    let last = x.len() - 1;
    let time = |k: usize| scheme.horizon * S::from_count(k) / S::from_count(n);
    let boundary = |t: S, y: S| -> S {
        (0..nu)
            .map(|u| frozen_control_value(spec, controls, u, t, y, scheme.horizon))
            .fold(S::infinity(), S::min)
    };
    let mut current: Vec<S> = x.iter().map(|y| spec.g_terminal(&[*y], &obs)).collect();
    let mut times = vec![time(n)];
    let mut values = vec![current.clone()];
    for k in (0..n).rev() {
        let t = time(k);
        let prev = &current;
        let mut next: Vec<S> = (0..x.len())
            .into_par_iter()
            .with_min_len(128)
            .map(|j| {
                if j == 0 || j == last {
                    return S::zero();
                }
                let lap = (prev[j + 1] - S::lit(2.0) * prev[j] + prev[j - 1]) / h2;
                (0..nu)
                    .map(|u| prev[j] + dt * (half_a[u] * lap + spec.f(t, &[x[j]], controls.get(u), &obs)))
                    .fold(S::infinity(), S::min)
            })
            .collect();
        next[0] = boundary(t, x[0]);
        next[last] = boundary(t, x[last]);
        current = next;
        if k % scheme.stride == 0 || k == 0 {
            times.push(t);
            values.push(current.clone());
        }
    }
    times.reverse();
    values.reverse();
    Ok(FdSolution { x, times, values })
}
