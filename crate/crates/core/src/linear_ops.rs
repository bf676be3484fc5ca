//! Orthogonal operators built from packed rotations, the `U Σ Vᵀ` operator
//! with trainable singular values, and the singular-value regularizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense::Matrix;
use crate::error::{check_len, DizzyError, Result};
use crate::rotations::{round_robin_schedule, PackedRotation, PairSchedule};

static NEXT_OP_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_OP_ID.fetch_add(1, Ordering::Relaxed)
}

/// Stage inputs recorded by a forward pass, consumed by the matching backward.
///
/// The cache is tagged with the identity of the operator state it was
/// recorded against; any parameter update re-tags the operator, so a cache
/// from before the update is rejected.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    tag: u64,
    n: usize,
    stages: usize,
    data: Vec<f64>,
}

impl ForwardCache {
    fn with_capacity(tag: u64, n: usize, stages: usize) -> Self {
        ForwardCache {
            tag,
            n,
            stages: 0,
            data: Vec::with_capacity(n * stages),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.data.extend_from_slice(x);
        self.stages += 1;
    }

    pub fn stage_count(&self) -> usize {
        self.stages
    }

    /// Input vector that entered stage `i`.
    pub fn stage(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    fn check(&self, tag: u64, n: usize, stages: usize) -> Result<()> {
        if self.tag != tag {
            return Err(DizzyError::CacheMismatch(
                "cache was recorded against a different or since-updated operator".into(),
            ));
        }
        if self.n != n || self.stages != stages {
            return Err(DizzyError::CacheMismatch(format!(
                "cache holds {} stages of width {}, operator needs {} of width {}",
                self.stages, self.n, stages, n
            )));
        }
        Ok(())
    }
}

/// Ordered stack of packed rotations. `rounds[0]` is applied first, so the
/// represented matrix is `R_{k-1} ⋯ R_1 R_0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "OrthogonalOpRepr", into = "OrthogonalOpRepr")]
pub struct OrthogonalOp {
    n: usize,
    rounds: Vec<PackedRotation>,
    tag: u64,
}

#[derive(Serialize, Deserialize)]
struct OrthogonalOpRepr {
    n: usize,
    rounds: Vec<PackedRotation>,
}

impl TryFrom<OrthogonalOpRepr> for OrthogonalOp {
    type Error = DizzyError;

    fn try_from(repr: OrthogonalOpRepr) -> Result<Self> {
        OrthogonalOp::new(repr.n, repr.rounds)
    }
}

impl From<OrthogonalOp> for OrthogonalOpRepr {
    fn from(op: OrthogonalOp) -> Self {
        OrthogonalOpRepr {
            n: op.n,
            rounds: op.rounds,
        }
    }
}

impl PartialEq for OrthogonalOp {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.rounds == other.rounds
    }
}

impl OrthogonalOp {
    pub fn new(n: usize, rounds: Vec<PackedRotation>) -> Result<Self> {
        for r in &rounds {
            check_len("packed rotation dimension", n, r.n())?;
        }
        Ok(OrthogonalOp {
            n,
            rounds,
            tag: fresh_id(),
        })
    }

    /// First `k` rounds of `schedule`, angles drawn uniformly from `[-π, π)`.
    pub fn random<R: Rng + ?Sized>(schedule: &PairSchedule, k: usize, rng: &mut R) -> Result<Self> {
        let rounds = prefix_rounds(schedule, k)?
            .iter()
            .map(|pairs| PackedRotation::random(schedule.n(), pairs.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        OrthogonalOp::new(schedule.n(), rounds)
    }

    /// First `k` rounds of `schedule` with all angles zero.
    pub fn identity(schedule: &PairSchedule, k: usize) -> Result<Self> {
        let rounds = prefix_rounds(schedule, k)?
            .iter()
            .map(|pairs| PackedRotation::identity(schedule.n(), pairs.clone()))
            .collect::<Result<Vec<_>>>()?;
        OrthogonalOp::new(schedule.n(), rounds)
    }

    /// Random operator over the circle-method schedule for `n`.
    pub fn random_with_rounds<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        OrthogonalOp::random(&round_robin_schedule(n)?, k, rng)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rounds(&self) -> &[PackedRotation] {
        &self.rounds
    }

    pub fn num_angles(&self) -> usize {
        self.rounds.iter().map(|r| r.angles().len()).sum()
    }

    /// Mutates each round's angles through `f(round_index, angles)`.
    pub fn update_angles<F: FnMut(usize, &mut [f64])>(&mut self, mut f: F) {
        for (i, round) in self.rounds.iter_mut().enumerate() {
            round.update_angles(|a| f(i, a));
        }
        self.tag = fresh_id();
    }

    /// `y = Q x` along with the per-round inputs.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len("orthogonal operator input", self.n, x.len())?;
        let mut y = x.to_vec();
        let cache = self.forward_in_place(&mut y);
        Ok((y, cache))
    }

    pub fn forward_in_place(&self, x: &mut [f64]) -> ForwardCache {
        let mut cache = ForwardCache::with_capacity(self.tag, self.n, self.rounds.len());
        for round in &self.rounds {
            cache.push(x);
            round.apply_in_place(x);
        }
        cache
    }

    /// `Qᵀ g` without recording anything.
    pub fn apply_adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_len("orthogonal operator adjoint input", self.n, g.len())?;
        let mut out = g.to_vec();
        for round in self.rounds.iter().rev() {
            round.apply_adjoint_in_place(&mut out);
        }
        Ok(out)
    }

    /// `(∂L/∂x, ∂L/∂angles)` from `∂L/∂y` and the cache of the matching forward.
    pub fn backward(&self, g_y: &[f64], cache: &ForwardCache) -> Result<(Vec<f64>, OrthogonalGrads)> {
        check_len("orthogonal operator gradient", self.n, g_y.len())?;
        let mut g = g_y.to_vec();
        let mut grads = OrthogonalGrads::zeros_like(self);
        self.backward_in_place(&mut g, cache, &mut grads)?;
        Ok((g, grads))
    }

    /// In-place backward; angle gradients are added into `grads`.
    pub fn backward_in_place(&self, g: &mut [f64], cache: &ForwardCache, grads: &mut OrthogonalGrads) -> Result<()> {
        cache.check(self.tag, self.n, self.rounds.len())?;
        check_len("orthogonal gradient rounds", self.rounds.len(), grads.angles.len())?;
        for (i, round) in self.rounds.iter().enumerate().rev() {
            round.backward_in_place(g, cache.stage(i), &mut grads.angles[i]);
        }
        Ok(())
    }

    /// Dense matrix as the ordered product of round matrices.
    pub fn materialize(&self) -> Matrix {
        self.rounds.iter().fold(Matrix::identity(self.n), |acc, round| {
            round.to_matrix().matmul(&acc).expect("rounds share the operator dimension")
        })
    }

    // Vᵀ stage of an SVD operator: adjoint rounds, last round first.
    fn adjoint_forward_record(&self, x: &mut [f64], cache: &mut ForwardCache) {
        for round in self.rounds.iter().rev() {
            cache.push(x);
            round.apply_adjoint_in_place(x);
        }
    }

    fn adjoint_backward_stages(&self, g: &mut [f64], cache: &ForwardCache, offset: usize, grads: &mut OrthogonalGrads) {
        let k = self.rounds.len();
        for j in (0..k).rev() {
            let round_index = k - 1 - j;
            self.rounds[round_index].adjoint_backward_in_place(
                g,
                cache.stage(offset + j),
                &mut grads.angles[round_index],
            );
        }
    }
}

fn prefix_rounds(schedule: &PairSchedule, k: usize) -> Result<&[Vec<(usize, usize)>]> {
    if k > schedule.len() {
        return Err(DizzyError::InvalidConfig(format!(
            "{k} packed rotations requested but the schedule for n = {} has only {}",
            schedule.n(),
            schedule.len()
        )));
    }
    Ok(&schedule.rounds()[..k])
}

/// Angle gradients, one vector per round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalGrads {
    pub angles: Vec<Vec<f64>>,
}

impl OrthogonalGrads {
    pub fn zeros_like(op: &OrthogonalOp) -> Self {
        OrthogonalGrads {
            angles: op.rounds.iter().map(|r| vec![0.0; r.angles().len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &OrthogonalGrads) {
        for (a, b) in self.angles.iter_mut().zip(&other.angles) {
            crate::dense::add_assign(a, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.angles.iter_mut().flatten().for_each(|v| *v *= factor);
    }
}

/// `U diag(σ) Vᵀ` with `U`, `V` orthogonal operators.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SvdOpRepr", into = "SvdOpRepr")]
pub struct SvdOp {
    u: OrthogonalOp,
    sigma: Vec<f64>,
    v: OrthogonalOp,
    tag: u64,
}

#[derive(Serialize, Deserialize)]
struct SvdOpRepr {
    u: OrthogonalOp,
    sigma: Vec<f64>,
    v: OrthogonalOp,
}

impl TryFrom<SvdOpRepr> for SvdOp {
    type Error = DizzyError;

    fn try_from(repr: SvdOpRepr) -> Result<Self> {
        SvdOp::new(repr.u, repr.sigma, repr.v)
    }
}

impl From<SvdOp> for SvdOpRepr {
    fn from(op: SvdOp) -> Self {
        SvdOpRepr {
            u: op.u,
            sigma: op.sigma,
            v: op.v,
        }
    }
}

impl PartialEq for SvdOp {
    fn eq(&self, other: &Self) -> bool {
        self.u == other.u && self.sigma == other.sigma && self.v == other.v
    }
}

impl SvdOp {
    pub fn new(u: OrthogonalOp, sigma: Vec<f64>, v: OrthogonalOp) -> Result<Self> {
        check_len("V dimension", u.n(), v.n())?;
        check_len("singular values", u.n(), sigma.len())?;
        Ok(SvdOp {
            u,
            sigma,
            v,
            tag: fresh_id(),
        })
    }

    /// Random `U`, `V` over the first `k` rounds; `σ = 1`, which makes the
    /// operator orthogonal at initialization.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        let schedule = round_robin_schedule(n)?;
        let u = OrthogonalOp::random(&schedule, k, rng)?;
        let v = OrthogonalOp::random(&schedule, k, rng)?;
        SvdOp::new(u, vec![1.0; n], v)
    }

    pub fn n(&self) -> usize {
        self.u.n()
    }

    pub fn u(&self) -> &OrthogonalOp {
        &self.u
    }

    pub fn v(&self) -> &OrthogonalOp {
        &self.v
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Mutates `(U, σ, V)` together; caches recorded before the call become stale.
    pub fn update<F>(&mut self, f: F)
    where
        F: FnOnce(&mut OrthogonalOp, &mut [f64], &mut OrthogonalOp),
    {
        f(&mut self.u, &mut self.sigma, &mut self.v);
        self.tag = fresh_id();
    }

    fn stage_count(&self) -> usize {
        self.v.rounds().len() + 1 + self.u.rounds().len()
    }

    /// `y = U (σ ⊙ (Vᵀ x))`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len("svd operator input", self.n(), x.len())?;
        let mut y = x.to_vec();
        let cache = self.forward_in_place(&mut y);
        Ok((y, cache))
    }

    pub fn forward_in_place(&self, x: &mut [f64]) -> ForwardCache {
        let mut cache = ForwardCache::with_capacity(self.tag, self.n(), self.stage_count());
        self.v.adjoint_forward_record(x, &mut cache);
        cache.push(x);
        for (xi, s) in x.iter_mut().zip(&self.sigma) {
            *xi *= s;
        }
        for round in self.u.rounds() {
            cache.push(x);
            round.apply_in_place(x);
        }
        cache
    }

    /// `Aᵀ g = V (σ ⊙ (Uᵀ g))`.
    pub fn apply_adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.u.apply_adjoint(g)?;
        for (o, s) in out.iter_mut().zip(&self.sigma) {
            *o *= s;
        }
        for round in self.v.rounds() {
            round.apply_in_place(&mut out);
        }
        Ok(out)
    }

    pub fn backward(&self, g_y: &[f64], cache: &ForwardCache) -> Result<(Vec<f64>, SvdGrads)> {
        check_len("svd operator gradient", self.n(), g_y.len())?;
        let mut g = g_y.to_vec();
        let mut grads = SvdGrads::zeros_like(self);
        self.backward_in_place(&mut g, cache, &mut grads)?;
        Ok((g, grads))
    }

    pub fn backward_in_place(&self, g: &mut [f64], cache: &ForwardCache, grads: &mut SvdGrads) -> Result<()> {
        cache.check(self.tag, self.n(), self.stage_count())?;
        let kv = self.v.rounds().len();
        let diag = kv;
        for (i, round) in self.u.rounds().iter().enumerate().rev() {
            round.backward_in_place(g, cache.stage(diag + 1 + i), &mut grads.u.angles[i]);
        }
        let diag_in = cache.stage(diag);
        for i in 0..g.len() {
            grads.sigma[i] += diag_in[i] * g[i];
            g[i] *= self.sigma[i];
        }
        self.v.adjoint_backward_stages(g, cache, 0, &mut grads.v);
        Ok(())
    }

    pub fn materialize(&self) -> Matrix {
        let n = self.n();
        let mut scaled = self.u.materialize();
        for r in 0..n {
            for (c, s) in self.sigma.iter().enumerate() {
                scaled.set(r, c, scaled.get(r, c) * s);
            }
        }
        scaled
            .matmul(&self.v.materialize().transpose())
            .expect("square operators of equal size")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdGrads {
    pub u: OrthogonalGrads,
    pub sigma: Vec<f64>,
    pub v: OrthogonalGrads,
}

impl SvdGrads {
    pub fn zeros_like(op: &SvdOp) -> Self {
        SvdGrads {
            u: OrthogonalGrads::zeros_like(&op.u),
            sigma: vec![0.0; op.n()],
            v: OrthogonalGrads::zeros_like(&op.v),
        }
    }

    pub fn add_assign(&mut self, other: &SvdGrads) {
        self.u.add_assign(&other.u);
        crate::dense::add_assign(&mut self.sigma, &other.sigma);
        self.v.add_assign(&other.v);
    }

    pub fn scale(&mut self, factor: f64) {
        self.u.scale(factor);
        self.sigma.iter_mut().for_each(|v| *v *= factor);
        self.v.scale(factor);
    }
}

/// `½ λ Σᵢ ‖σ⁽ⁱ⁾ − 1‖²` and its gradient `λ (σ⁽ⁱ⁾ − 1)` for each vector.
pub fn sv_regularizer(sigmas: &[&[f64]], lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(DizzyError::InvalidConfig(format!(
            "singular value penalty must be finite and non-negative, got {lambda}"
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(sigmas.len());
    for sigma in sigmas {
        let dev: Vec<f64> = sigma.iter().map(|s| s - 1.0).collect();
        loss += dev.iter().map(|d| d * d).sum::<f64>();
        grads.push(dev.into_iter().map(|d| lambda * d).collect());
    }
    Ok((0.5 * lambda * loss, grads))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Naive triple-loop products, independent of Matrix::matmul.
    fn naive_mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
        (0..m.rows())
            .map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum())
            .collect()
    }

    fn relative(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / crate::dense::norm2(b).max(1e-300)
    }

    #[test]
    fn zero_rounds_is_identity() {
        let op = OrthogonalOp::new(3, vec![]).unwrap();
        let (y, cache) = op.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
        let (g, grads) = op.backward(&[0.5, 0.5, 0.5], &cache).unwrap();
        assert_eq!(g, vec![0.5, 0.5, 0.5]);
        assert!(grads.angles.is_empty());
    }

    #[test]
    fn zero_angles_is_identity() {
        let schedule = round_robin_schedule(6).unwrap();
        let op = OrthogonalOp::identity(&schedule, 5).unwrap();
        let (y, _) = op.forward(&[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        assert_eq!(op.materialize(), Matrix::identity(6));
    }

    #[test]
    fn materialize_two_by_two() {
        let op = OrthogonalOp::new(2, vec![PackedRotation::new(2, vec![(0, 1)], vec![0.3]).unwrap()]).unwrap();
        let m = op.materialize();
        assert_abs_diff_eq!(m.get(0, 0), 0.3f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(0, 1), 0.3f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(1, 0), -(0.3f64.sin()), epsilon = 1e-15);
        assert_abs_diff_eq!(m.get(1, 1), 0.3f64.cos(), epsilon = 1e-15);
    }

    #[test]
    fn full_schedule_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let op = OrthogonalOp::random_with_rounds(6, 5, &mut rng).unwrap();
        assert!(op.materialize().orthogonality_defect() <= 1e-12);
    }

    #[test]
    fn forward_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 5, 8, 13] {
            let k = round_robin_schedule(n).unwrap().len();
            let op = OrthogonalOp::random_with_rounds(n, k, &mut rng).unwrap();
            let x = random_vec(&mut rng, n);
            let (y, cache) = op.forward(&x).unwrap();
            assert_eq!(cache.stage_count(), k);
            assert!(relative(&y, &naive_mat_vec(&op.materialize(), &x)) <= 1e-11);
            assert!((crate::dense::norm2(&y) / crate::dense::norm2(&x) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_round_backward_equals_packed_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let op = OrthogonalOp::random_with_rounds(6, 1, &mut rng).unwrap();
        let x = random_vec(&mut rng, 6);
        let g_y = random_vec(&mut rng, 6);
        let (_, cache) = op.forward(&x).unwrap();
        let (g_x, grads) = op.backward(&g_y, &cache).unwrap();
        let (pg, pa) = op.rounds()[0].backward(&g_y, &x).unwrap();
        assert_eq!(g_x, pg);
        assert_eq!(grads.angles[0], pa);
    }

    #[test]
    fn ortho_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let op = OrthogonalOp::random_with_rounds(8, 7, &mut rng).unwrap();
        let x = random_vec(&mut rng, 8);
        let w = random_vec(&mut rng, 8);
        let loss = |op: &OrthogonalOp| -> f64 {
            let (y, _) = op.forward(&x).unwrap();
            y.iter().zip(&w).map(|(y, w)| w * y * y).sum()
        };
        let (y, cache) = op.forward(&x).unwrap();
        let g_y: Vec<f64> = y.iter().zip(&w).map(|(y, w)| 2.0 * w * y).collect();
        let (g_x, grads) = op.backward(&g_y, &cache).unwrap();
        assert!((crate::dense::norm2(&g_x) / crate::dense::norm2(&g_y) - 1.0).abs() <= 1e-11);
        let h = 1e-6;
        for r in 0..7 {
            for i in 0..4 {
                let bump = |delta: f64| {
                    let mut o = op.clone();
                    o.update_angles(|ri, a| {
                        if ri == r {
                            a[i] += delta
                        }
                    });
                    loss(&o)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grads.angles[r][i];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1.0) <= 1e-5, "round {r} pair {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut op = OrthogonalOp::random_with_rounds(4, 3, &mut rng).unwrap();
        let (_, cache) = op.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        op.update_angles(|_, a| a[0] += 0.1);
        assert!(matches!(op.backward(&[1.0; 4], &cache), Err(DizzyError::CacheMismatch(_))));

        let other = OrthogonalOp::random_with_rounds(4, 3, &mut rng).unwrap();
        let (_, cache) = other.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(op.backward(&[1.0; 4], &cache).is_err());
    }

    #[test]
    fn too_many_rounds_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        assert!(matches!(
            OrthogonalOp::random_with_rounds(4, 4, &mut rng),
            Err(DizzyError::InvalidConfig(_))
        ));
    }

    #[test]
    fn svd_forward_examples() {
        let schedule = round_robin_schedule(2).unwrap();
        let u = OrthogonalOp::identity(&schedule, 1).unwrap();
        let v = OrthogonalOp::identity(&schedule, 1).unwrap();
        let op = SvdOp::new(u.clone(), vec![1.0, 1.0], v.clone()).unwrap();
        assert_eq!(op.forward(&[0.25, -4.0]).unwrap().0, vec![0.25, -4.0]);
        let op = SvdOp::new(u, vec![2.0, 3.0], v).unwrap();
        assert_eq!(op.forward(&[1.0, 1.0]).unwrap().0, vec![2.0, 3.0]);
    }

    #[test]
    fn svd_forward_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut op = SvdOp::random(7, 4, &mut rng).unwrap();
        op.update(|_, s, _| s.iter_mut().for_each(|x| *x = rng.gen_range(0.2..3.0)));
        let x = random_vec(&mut rng, 7);
        let (y, cache) = op.forward(&x).unwrap();
        assert_eq!(cache.stage_count(), 9);
        // Dense U·diag(σ)·Vᵀ·x assembled from the orthogonal factors directly.
        let vt_x = naive_mat_vec(&op.v().materialize().transpose(), &x);
        let scaled: Vec<f64> = vt_x.iter().zip(op.sigma()).map(|(a, s)| a * s).collect();
        let want = naive_mat_vec(&op.u().materialize(), &scaled);
        assert!(relative(&y, &want) <= 1e-11);
        assert!(relative(&y, &naive_mat_vec(&op.materialize(), &x)) <= 1e-11);
    }

    #[test]
    fn svd_backward_trivial_cases() {
        let schedule = round_robin_schedule(3).unwrap();
        let op = SvdOp::new(
            OrthogonalOp::identity(&schedule, 2).unwrap(),
            vec![1.0; 3],
            OrthogonalOp::identity(&schedule, 2).unwrap(),
        )
        .unwrap();
        let x = [0.5, -1.0, 2.0];
        let g_y = [1.0, 2.0, 3.0];
        let (_, cache) = op.forward(&x).unwrap();
        let (g_x, grads) = op.backward(&g_y, &cache).unwrap();
        assert_eq!(g_x, g_y.to_vec());
        let diag_in = cache.stage(2);
        let expected: Vec<f64> = diag_in.iter().zip(&g_y).map(|(a, b)| a * b).collect();
        assert_eq!(grads.sigma, expected);

        let (g_x, grads) = op.backward(&[0.0; 3], &cache).unwrap();
        assert!(g_x.iter().all(|v| *v == 0.0));
        assert!(grads.sigma.iter().all(|v| *v == 0.0));
        assert!(grads.u.angles.iter().chain(&grads.v.angles).flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn svd_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut op = SvdOp::random(6, 3, &mut rng).unwrap();
        op.update(|_, s, _| s.iter_mut().for_each(|x| *x = rng.gen_range(0.5..2.0)));
        let x = random_vec(&mut rng, 6);
        let w = random_vec(&mut rng, 6);
        let loss = |op: &SvdOp, x: &[f64]| -> f64 {
            let (y, _) = op.forward(x).unwrap();
            y.iter().zip(&w).map(|(y, w)| w * y * y).sum()
        };
        let (y, cache) = op.forward(&x).unwrap();
        let g_y: Vec<f64> = y.iter().zip(&w).map(|(y, w)| 2.0 * w * y).collect();
        let (g_x, grads) = op.backward(&g_y, &cache).unwrap();
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1.0) <= 1e-5, "{what}: {fd} vs {an}");
        };
        for i in 0..6 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            check((loss(&op, &xp) - loss(&op, &xm)) / (2.0 * h), g_x[i], "x");
            let bump = |d: f64| {
                let mut o = op.clone();
                o.update(|_, s, _| s[i] += d);
                loss(&o, &x)
            };
            check((bump(h) - bump(-h)) / (2.0 * h), grads.sigma[i], "sigma");
        }
        for r in 0..3 {
            for i in 0..3 {
                let bump_u = |d: f64| {
                    let mut o = op.clone();
                    o.update(|u, _, _| u.update_angles(|ri, a| if ri == r { a[i] += d }));
                    loss(&o, &x)
                };
                check((bump_u(h) - bump_u(-h)) / (2.0 * h), grads.u.angles[r][i], "u");
                let bump_v = |d: f64| {
                    let mut o = op.clone();
                    o.update(|_, _, v| v.update_angles(|ri, a| if ri == r { a[i] += d }));
                    loss(&o, &x)
                };
                check((bump_v(h) - bump_v(-h)) / (2.0 * h), grads.v.angles[r][i], "v");
            }
        }
    }

    #[test]
    fn svd_adjoint_matches_dense_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut op = SvdOp::random(5, 5, &mut rng).unwrap();
        op.update(|_, s, _| s.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0)));
        let g = random_vec(&mut rng, 5);
        let want = naive_mat_vec(&op.materialize().transpose(), &g);
        assert!(relative(&op.apply_adjoint(&g).unwrap(), &want) <= 1e-11);
    }

    #[test]
    fn regularizer_examples() {
        let (loss, g) = sv_regularizer(&[&[1.0, 1.0, 1.0]], 3.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g, vec![vec![0.0; 3]]);

        let (loss, g) = sv_regularizer(&[&[5.0, -2.0]], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g[0].iter().all(|v| *v == 0.0));

        let (loss, g) = sv_regularizer(&[&[2.0, 0.0]], 1.0).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g, vec![vec![1.0, -1.0]]);

        assert!(matches!(sv_regularizer(&[&[1.0]], -0.5), Err(DizzyError::InvalidConfig(_))));
        assert!(sv_regularizer(&[&[1.0]], f64::NAN).is_err());
    }

    #[test]
    fn serde_round_trip_keeps_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let op = SvdOp::random(4, 2, &mut rng).unwrap();
        let back: SvdOp = serde_json::from_str(&serde_json::to_string(&op).unwrap()).unwrap();
        assert_eq!(op, back);
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(op.forward(&x).unwrap().0, back.forward(&x).unwrap().0);
    }
}
