//! Givens rotation primitives and packed rotations.
//!
//! A Givens rotation `R_{a,b}(θ)` acts on coordinates `a < b` only:
//!
//! ```text
//! y_a =  cos θ · x_a + sin θ · x_b
//! y_b = -sin θ · x_a + cos θ · x_b
//! ```
//!
//! A [`PackedRotation`] holds rotations on disjoint coordinate pairs, so all
//! of them can be applied in one O(n) pass. [`round_robin_schedule`] builds
//! the rounds of disjoint pairs that together cover every coordinate pair
//! exactly once.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense::Matrix;
use crate::error::{check_len, DizzyError, Result};

/// Rotates `(x_a, x_b)` by `theta`.
pub fn rotate_pair(x_a: f64, x_b: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    rotate_cs(x_a, x_b, c, s)
}

/// Applies the transpose of the rotation, i.e. rotation by `-theta`.
pub fn rotate_pair_adjoint(g_a: f64, g_b: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    rotate_adjoint_cs(g_a, g_b, c, s)
}

/// `∂L/∂θ` for a single rotation, given the upstream gradient `(g_a, g_b)`
/// on the rotated outputs and the rotation inputs `(x_a, x_b)`.
///
/// Evaluates `[g_a g_b] · [[-sin θ, cos θ], [-cos θ, -sin θ]] · [x_a x_b]ᵀ`.
pub fn angle_gradient(g_a: f64, g_b: f64, x_a: f64, x_b: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    angle_gradient_cs(g_a, g_b, x_a, x_b, c, s)
}

#[inline]
fn rotate_cs(x_a: f64, x_b: f64, c: f64, s: f64) -> (f64, f64) {
    (c * x_a + s * x_b, -s * x_a + c * x_b)
}

#[inline]
fn rotate_adjoint_cs(g_a: f64, g_b: f64, c: f64, s: f64) -> (f64, f64) {
    (c * g_a - s * g_b, s * g_a + c * g_b)
}

#[inline]
fn angle_gradient_cs(g_a: f64, g_b: f64, x_a: f64, x_b: f64, c: f64, s: f64) -> f64 {
    g_a * (-s * x_a + c * x_b) + g_b * (-c * x_a - s * x_b)
}

/// Rounds of disjoint coordinate pairs over `n` coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSchedule {
    n: usize,
    rounds: Vec<Vec<(usize, usize)>>,
}

impl PairSchedule {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rounds(&self) -> &[Vec<(usize, usize)>] {
        &self.rounds
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

/// Circle-method round-robin schedule.
///
/// Index 0 stays fixed while the remaining indices rotate one seat per round.
/// Even `n` gives `n - 1` rounds of `n / 2` pairs. Odd `n` is padded with a
/// phantom index; whoever meets it sits the round out, giving `n` rounds of
/// `(n - 1) / 2` pairs.
pub fn round_robin_schedule(n: usize) -> Result<PairSchedule> {
    if n < 2 {
        return Err(DizzyError::InvalidDimension { n });
    }
    let seats = if n % 2 == 0 { n } else { n + 1 };
    let ring = seats - 1;
    let mut rounds = Vec::with_capacity(ring);
    for r in 0..ring {
        let seat = |i: usize| if i == 0 { 0 } else { 1 + (i - 1 + r) % ring };
        let mut pairs = Vec::with_capacity(seats / 2);
        for i in 0..seats / 2 {
            let (p, q) = (seat(i), seat(seats - 1 - i));
            if p >= n || q >= n {
                continue;
            }
            pairs.push((p.min(q), p.max(q)));
        }
        rounds.push(pairs);
    }
    Ok(PairSchedule { n, rounds })
}

/// Disjoint Givens rotations applied together.
///
/// Trigonometric values are cached alongside the angles and refreshed on
/// every angle update, so application never calls `sin`/`cos`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PackedRotationRepr", into = "PackedRotationRepr")]
pub struct PackedRotation {
    n: usize,
    pairs: Vec<(usize, usize)>,
    angles: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PackedRotationRepr {
    n: usize,
    pairs: Vec<(usize, usize)>,
    angles: Vec<f64>,
}

impl TryFrom<PackedRotationRepr> for PackedRotation {
    type Error = DizzyError;

    fn try_from(repr: PackedRotationRepr) -> Result<Self> {
        PackedRotation::new(repr.n, repr.pairs, repr.angles)
    }
}

impl From<PackedRotation> for PackedRotationRepr {
    fn from(p: PackedRotation) -> Self {
        PackedRotationRepr {
            n: p.n,
            pairs: p.pairs,
            angles: p.angles,
        }
    }
}

impl PartialEq for PackedRotation {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.pairs == other.pairs && self.angles == other.angles
    }
}

impl PackedRotation {
    pub fn new(n: usize, pairs: Vec<(usize, usize)>, angles: Vec<f64>) -> Result<Self> {
        check_len("packed rotation angles", pairs.len(), angles.len())?;
        let mut used = vec![false; n];
        for &(a, b) in &pairs {
            if a >= b || b >= n || used[a] || used[b] {
                return Err(DizzyError::InvalidPair { a, b, n });
            }
            used[a] = true;
            used[b] = true;
        }
        let mut p = PackedRotation {
            n,
            pairs,
            cos: vec![0.0; angles.len()],
            sin: vec![0.0; angles.len()],
            angles,
        };
        p.refresh();
        Ok(p)
    }

    /// All angles zero (the identity).
    pub fn identity(n: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let angles = vec![0.0; pairs.len()];
        PackedRotation::new(n, pairs, angles)
    }

    /// Angles drawn uniformly from `[-π, π)`.
    pub fn random<R: Rng + ?Sized>(n: usize, pairs: Vec<(usize, usize)>, rng: &mut R) -> Result<Self> {
        let angles = (0..pairs.len()).map(|_| rng.gen_range(-PI..PI)).collect();
        PackedRotation::new(n, pairs, angles)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn set_angles(&mut self, angles: &[f64]) -> Result<()> {
        check_len("packed rotation angles", self.angles.len(), angles.len())?;
        self.angles.copy_from_slice(angles);
        self.refresh();
        Ok(())
    }

    /// Mutates the angles in place, then refreshes the cached trig values.
    pub fn update_angles<F: FnOnce(&mut [f64])>(&mut self, f: F) {
        f(&mut self.angles);
        self.refresh();
    }

    fn refresh(&mut self) {
        for ((c, s), theta) in self.cos.iter_mut().zip(self.sin.iter_mut()).zip(&self.angles) {
            let (sv, cv) = theta.sin_cos();
            *c = cv;
            *s = sv;
        }
    }

    /// `y = P x`. Coordinates outside every pair pass through.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("packed rotation input", self.n, x.len())?;
        let mut y = x.to_vec();
        self.apply_in_place(&mut y);
        Ok(y)
    }

    /// `(∂L/∂x, ∂L/∂θ)` given `∂L/∂y` and the input `x_in` fed to [`forward`](Self::forward).
    pub fn backward(&self, g_y: &[f64], x_in: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("packed rotation gradient", self.n, g_y.len())?;
        check_len("packed rotation cached input", self.n, x_in.len())?;
        let mut g = g_y.to_vec();
        let mut g_angles = vec![0.0; self.pairs.len()];
        self.backward_in_place(&mut g, x_in, &mut g_angles);
        Ok((g, g_angles))
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let (ya, yb) = rotate_cs(x[a], x[b], self.cos[i], self.sin[i]);
            x[a] = ya;
            x[b] = yb;
        }
    }

    /// `x ← Pᵀ x`.
    pub fn apply_adjoint_in_place(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let (ya, yb) = rotate_adjoint_cs(x[a], x[b], self.cos[i], self.sin[i]);
            x[a] = ya;
            x[b] = yb;
        }
    }

    /// Backward pass for `y = P x`: turns `g` from `∂L/∂y` into `∂L/∂x` and
    /// adds each pair's angle gradient into `g_angles`.
    pub fn backward_in_place(&self, g: &mut [f64], x_in: &[f64], g_angles: &mut [f64]) {
        debug_assert_eq!(g.len(), self.n);
        debug_assert_eq!(x_in.len(), self.n);
        debug_assert_eq!(g_angles.len(), self.pairs.len());
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let (c, s) = (self.cos[i], self.sin[i]);
            g_angles[i] += angle_gradient_cs(g[a], g[b], x_in[a], x_in[b], c, s);
            let (ga, gb) = rotate_adjoint_cs(g[a], g[b], c, s);
            g[a] = ga;
            g[b] = gb;
        }
    }

    /// Backward pass for `y = Pᵀ x`. Since `Pᵀ` rotates by `-θ`, the angle
    /// gradient is the negated single-rotation gradient evaluated at `-θ`.
    pub fn adjoint_backward_in_place(&self, g: &mut [f64], x_in: &[f64], g_angles: &mut [f64]) {
        debug_assert_eq!(g.len(), self.n);
        debug_assert_eq!(x_in.len(), self.n);
        debug_assert_eq!(g_angles.len(), self.pairs.len());
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let (c, s) = (self.cos[i], self.sin[i]);
            g_angles[i] -= angle_gradient_cs(g[a], g[b], x_in[a], x_in[b], c, -s);
            let (ga, gb) = rotate_cs(g[a], g[b], c, s);
            g[a] = ga;
            g[b] = gb;
        }
    }

    /// Dense `n × n` matrix of this packed rotation.
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::identity(self.n);
        for (i, &(a, b)) in self.pairs.iter().enumerate() {
            let (c, s) = (self.cos[i], self.sin[i]);
            m.set(a, a, c);
            m.set(a, b, s);
            m.set(b, a, -s);
            m.set(b, b, c);
        }
        m
    }
}
