//! Integer lattice of spatial shifts reachable by controlled states.
//!
//! Every control entry is required to be an integer multiple of a common
//! quantum `q`, so that `X_k` always lies on `q * sqrt(dt) * Z^d`. Fields are
//! then stored on finite offset windows around each base point and cost
//! functions are evaluated exactly at the shifted arguments.

use crate::control::ControlSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest denominator tried when looking for a common quantum.
const MAX_DENOMINATOR: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftLattice<S> {
    d: usize,
    branching: usize,
    quantum: S,
    unit: S,
    /// `moves[(u * branching + c) * d + r]`.
    moves: Vec<i64>,
    reach: usize,
}

impl<S: Real> ShiftLattice<S> {
    /// Detects the quantum from `controls` and builds the move table for
    /// `m`-dimensional increments of size `sqrt_dt`.
    pub fn new(controls: &ControlSet<S>, sqrt_dt: S) -> Result<Self> {
        let quantum = detect_quantum(controls)?;
        Self::with_quantum(controls, sqrt_dt, quantum)
    }

    pub fn with_quantum(controls: &ControlSet<S>, sqrt_dt: S, quantum: S) -> Result<Self> {
        let d = controls.d();
        let m = controls.m();
        let branching = 1usize << m;
        let mut moves = Vec::with_capacity(controls.len() * branching * d);
        let mut reach = 0usize;
        for (u, e) in controls.elements().iter().enumerate() {
            let ints: Vec<i64> = e
                .iter()
                .map(|v| {
                    let r = (*v / quantum).round();
                    if (*v / quantum - r).abs() > S::snap_tolerance() {
                        Err(Error::config(
                            format!("controls[{u}]"),
                            format!("entry {v} is not a multiple of the quantum {quantum}"),
                        ))
                    } else {
                        Ok(r.to_i64().unwrap_or(0))
                    }
                })
                .collect::<Result<_>>()?;
            for c in 0..branching {
                for r in 0..d {
                    let mv: i64 = (0..m)
                        .map(|j| if (c >> j) & 1 == 1 { ints[r * m + j] } else { -ints[r * m + j] })
                        .sum();
                    reach = reach.max(mv.unsigned_abs() as usize);
                    moves.push(mv);
                }
            }
        }
        Ok(Self {
            d,
            branching,
            quantum,
            unit: quantum * sqrt_dt,
            moves,
            reach,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn quantum(&self) -> S {
        self.quantum
    }

    /// Spatial length of one lattice step, `q * sqrt(dt)`.
    pub fn unit(&self) -> S {
        self.unit
    }

    /// Largest per-coordinate move of a single step.
    pub fn reach(&self) -> usize {
        self.reach
    }

    /// Lattice move of control `u` along child slot `c`.
    #[inline]
    pub fn moves(&self, u: usize, c: usize) -> &[i64] {
        let at = (u * self.branching + c) * self.d;
        &self.moves[at..at + self.d]
    }

    pub fn half_width(&self, k: usize) -> usize {
        k * self.reach
    }

    /// Number of offsets in the level-`k` window.
    pub fn window_len(&self, k: usize) -> usize {
        (2 * self.half_width(k) + 1).pow(self.d as u32)
    }

    /// Position of `offset` in the level-`k` window, if inside.
    #[inline]
    pub fn index(&self, k: usize, offset: &[i64]) -> Option<usize> {
        let hw = self.half_width(k) as i64;
        let side = 2 * hw + 1;
        let mut idx = 0i64;
        for o in offset {
            if o.abs() > hw {
                return None;
            }
            idx = idx * side + (o + hw);
        }
        Some(idx as usize)
    }

    /// Inverse of [`ShiftLattice::index`].
    pub fn offset(&self, k: usize, index: usize) -> Vec<i64> {
        let hw = self.half_width(k) as i64;
        let side = 2 * hw + 1;
        let mut out = vec![0i64; self.d];
        let mut rest = index as i64;
        for o in out.iter_mut().rev() {
            *o = rest % side - hw;
            rest /= side;
        }
        out
    }

    /// `base + unit * offset`.
    pub fn point(&self, base: &[S], offset: &[i64]) -> Vec<S> {
        base.iter()
            .zip(offset)
            .map(|(b, o)| *b + self.unit * S::from_int(*o))
            .collect()
    }

    /// Index of the window entry reached from `index` (level `k`) by the move
    /// of control `u` along child slot `c`, as an index in the level-`k + 1`
    /// window.
    #[inline]
    pub fn advance(&self, k: usize, index: usize, u: usize, c: usize) -> usize {
        let mut off = self.offset(k, index);
        for (o, mv) in off.iter_mut().zip(self.moves(u, c)) {
            *o += mv;
        }
        self.index(k + 1, &off).expect("window grows by the reach per level")
    }
}

/// Smallest `a / n` (for `n <= 64`, `a` the smallest nonzero magnitude)
/// dividing every control entry.
pub fn detect_quantum<S: Real>(controls: &ControlSet<S>) -> Result<S> {
    let entries: Vec<S> = controls
        .elements()
        .iter()
        .flatten()
        .map(|v| v.abs())
        .filter(|v| *v > S::zero())
        .collect();
    let Some(a) = entries.iter().copied().reduce(S::min) else {
        return Ok(S::one());
    };
    for n in 1..=MAX_DENOMINATOR {
        let q = a / S::from_count(n);
        let fits = entries.iter().all(|v| {
            let r = *v / q;
            (r - r.round()).abs() <= S::snap_tolerance() * r.max(S::one())
        });
        if fits {
            return Ok(q);
        }
    }
    Err(Error::Unsupported(format!(
        "control entries admit no common quantum a/n with n <= {MAX_DENOMINATOR}; \
         states would not stay on a finite shift lattice"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantum_of_half_and_one() {
        let u = ControlSet::scalars(&[0.5, 1.0]).unwrap();
        assert_eq!(detect_quantum(&u).unwrap(), 0.5);
        let u = ControlSet::scalars(&[0.0]).unwrap();
        assert_eq!(detect_quantum(&u).unwrap(), 1.0);
        let u = ControlSet::scalars(&[1.0, std::f64::consts::PI]).unwrap();
        assert!(detect_quantum(&u).is_err());
        let u = ControlSet::scalars(&[0.3, 0.5]).unwrap();
        assert!((detect_quantum::<f64>(&u).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn moves_and_windows() {
        let u = ControlSet::scalars(&[0.5, 1.0]).unwrap();
        let lat = ShiftLattice::new(&u, 0.5f64).unwrap();
        assert_eq!(lat.reach(), 2);
        assert_eq!(lat.moves(0, 0), &[-1]);
        assert_eq!(lat.moves(1, 1), &[2]);
        assert_eq!(lat.unit(), 0.25);
        assert_eq!(lat.window_len(3), 13);
        assert_eq!(lat.index(3, &[0]), Some(6));
        assert_eq!(lat.index(1, &[3]), None);
        assert_eq!(lat.offset(3, 0), vec![-6]);
        assert_eq!(lat.advance(0, 0, 1, 0), lat.index(1, &[-2]).unwrap());
    }

    #[test]
    fn two_noise_moves() {
        let u = ControlSet::new(1, 2, vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let lat = ShiftLattice::new(&u, 1.0f64).unwrap();
        assert_eq!(lat.reach(), 3);
        let all: Vec<i64> = (0..4).map(|c| lat.moves(0, c)[0]).collect();
        assert_eq!(all, vec![-3, 1, -1, 3]);
    }

    #[test]
    fn two_dim_offsets_round_trip() {
        let u = ControlSet::new(2, 1, vec![vec![1.0, 2.0]]).unwrap();
        let lat = ShiftLattice::new(&u, 1.0f64).unwrap();
        for i in 0..lat.window_len(2) {
            let off = lat.offset(2, i);
            assert_eq!(lat.index(2, &off), Some(i));
        }
    }
}
