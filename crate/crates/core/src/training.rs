//! Backpropagation through time, masked softmax cross-entropy, plain SGD
//! and a central finite-difference gradient checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{CellGrads, CellParams, RecurrentCell, RecurrentGrads};
use crate::copy_task::CopyBatch;
use crate::dense::{add_assign, norm2};
use crate::error::{check_len, DizzyError, Result};
use crate::linear_ops::sv_regularizer;
use crate::model::{ModelGrads, ModelParams};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// How batch elements are scheduled. Both modes reduce per-sequence
/// gradients in batch order, so they produce identical results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

/// Per-timestep gradient norms, combined over the batch as
/// `sqrt(Σ_b ‖·‖²)`. Index `t` refers to the step that produced `h_t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    /// `‖∂L/∂h_t‖` including any readout gradient injected at step `t`.
    pub hidden: Vec<f64>,
    /// `‖∂L/∂h_{t-1}‖` as propagated back through the cell at step `t`.
    pub carried: Vec<f64>,
    /// `‖∂L/∂x_t‖`.
    pub input: Vec<f64>,
}

impl NormTrace {
    /// `max / min` of the hidden trace; 1 for an all-zero trace.
    pub fn ratio(&self) -> f64 {
        let max = self.hidden.iter().cloned().fold(0.0f64, f64::max);
        let min = self.hidden.iter().cloned().fold(f64::INFINITY, f64::min);
        if max == 0.0 {
            1.0
        } else {
            max / min
        }
    }

    fn add_squares(&mut self, other: &NormTrace) {
        for (acc, part) in [
            (&mut self.hidden, &other.hidden),
            (&mut self.carried, &other.carried),
            (&mut self.input, &other.input),
        ] {
            if acc.is_empty() {
                acc.resize(part.len(), 0.0);
            }
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p * p;
            }
        }
    }

    fn sqrt_in_place(&mut self) {
        for v in self.hidden.iter_mut().chain(&mut self.carried).chain(&mut self.input) {
            *v = v.sqrt();
        }
    }
}

fn log_softmax_parts(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    (max, sum)
}

/// Contribution of one scored step: `weight · (−log softmax(logits)[target])`
/// and its gradient `weight · (softmax − onehot)`.
fn weighted_xent(logits: &[f64], target: usize, weight: f64) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(DizzyError::shape("target class index", logits.len(), target));
    }
    let (max, sum) = log_softmax_parts(logits);
    let loss = -(logits[target] - max - sum.ln());
    let mut grad: Vec<f64> = logits.iter().map(|v| weight * (v - max).exp() / sum).collect();
    grad[target] -= weight;
    Ok((weight * loss, grad))
}

/// Mean masked cross-entropy over a logit sequence.
///
/// Returns the loss and `∂L/∂logits` for every step (zero where unmasked).
pub fn softmax_cross_entropy(logits: &[Vec<f64>], targets: &[usize], mask: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_len("targets", logits.len(), targets.len())?;
    check_len("mask", logits.len(), mask.len())?;
    let normalizer: f64 = mask.iter().sum();
    if normalizer <= 0.0 {
        return Err(DizzyError::DegenerateMask);
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for ((l, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if m == 0.0 {
            grads.push(vec![0.0; l.len()]);
            continue;
        }
        let (part, g) = weighted_xent(l, t, m / normalizer)?;
        loss += part;
        grads.push(g);
    }
    Ok((loss, grads))
}

struct SequenceResult {
    data_loss: f64,
    grads: ModelGrads,
    trace: NormTrace,
}

fn non_finite(stage: String) -> DizzyError {
    DizzyError::NumericOverflow { stage }
}

fn run_sequence(model: &ModelParams, batch: &CopyBatch, b: usize, normalizer: f64) -> Result<SequenceResult> {
    let cell = &model.cell;
    let n = cell.hidden_size();
    let t_len = batch.seq_len;
    let targets = batch.targets_of(b);
    let mask = batch.mask_of(b);

    let mut state = vec![0.0; cell.state_size()];
    let mut caches = Vec::with_capacity(t_len);
    // (h_t, ∂L/∂logits_t) for scored steps.
    let mut readouts: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(t_len);
    let mut data_loss = 0.0;
    for t in 0..t_len {
        let (next, cache) = cell.step(&state, batch.input(b, t))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(format!("cell forward at step {t} of sequence {b}")));
        }
        state = next;
        caches.push(cache);
        if mask[t] != 0.0 {
            let h = &state[..n];
            let logits = model.output.logits(h)?;
            let (part, g) = weighted_xent(&logits, targets[t], mask[t] / normalizer)?;
            if !part.is_finite() {
                return Err(non_finite(format!("loss at step {t} of sequence {b}")));
            }
            data_loss += part;
            readouts.push(Some((h.to_vec(), g)));
        } else {
            readouts.push(None);
        }
    }

    let mut grads = model.zero_grads();
    let mut trace = NormTrace {
        hidden: vec![0.0; t_len],
        carried: vec![0.0; t_len],
        input: vec![0.0; t_len],
    };
    let mut g_state = vec![0.0; cell.state_size()];
    for t in (0..t_len).rev() {
        if let Some((h, g_logits)) = &readouts[t] {
            model.output.w.matvec_transpose_add(g_logits, &mut g_state[..n])?;
            grads.output_w.add_outer(1.0, g_logits, h)?;
            add_assign(&mut grads.output_b, g_logits);
        }
        trace.hidden[t] = norm2(&g_state[..n]);
        let (g_prev, g_x) = cell.step_backward(&g_state, &caches[t], &mut grads.cell)?;
        if g_prev.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(format!("cell backward at step {t} of sequence {b}")));
        }
        trace.carried[t] = norm2(&g_prev[..n]);
        trace.input[t] = norm2(&g_x);
        g_state = g_prev;
    }
    Ok(SequenceResult { data_loss, grads, trace })
}

fn add_regularizer(model: &ModelParams, grads: &mut ModelGrads) -> Result<f64> {
    let Some(lambda) = model.sv_lambda else {
        return Ok(0.0);
    };
    let sigmas = model.cell.singular_values();
    let (reg_loss, reg_grads) = sv_regularizer(&sigmas, lambda)?;
    if let (CellParams::Dizzy(_), CellGrads::Dizzy(g)) = (&model.cell, &mut grads.cell) {
        if let (RecurrentGrads::Svd(svd), Some(rg)) = (&mut g.w_h, reg_grads.first()) {
            add_assign(&mut svd.sigma, rg);
        }
    }
    Ok(reg_loss)
}

/// Forward and backward over the whole batch, returning the loss report,
/// batch-averaged gradients and the per-step gradient norms.
pub fn forward_backward(batch: &CopyBatch, model: &ModelParams, exec: Execution) -> Result<(LossReport, ModelGrads, NormTrace)> {
    check_len("batch input width", model.cell.input_size(), batch.input_dim)?;
    check_len("batch classes", model.output.b.len(), batch.num_classes)?;
    let normalizer: f64 = batch.mask.iter().sum();
    if normalizer <= 0.0 {
        return Err(DizzyError::DegenerateMask);
    }
    let results: Vec<Result<SequenceResult>> = match exec {
        Execution::Sequential => (0..batch.batch_size)
            .map(|b| run_sequence(model, batch, b, normalizer))
            .collect(),
        Execution::Parallel => (0..batch.batch_size)
            .into_par_iter()
            .map(|b| run_sequence(model, batch, b, normalizer))
            .collect(),
    };

    let mut grads = model.zero_grads();
    let mut trace = NormTrace::default();
    let mut data_loss = 0.0;
    for r in results {
        let r = r?;
        data_loss += r.data_loss;
        grads.add_assign(&r.grads);
        trace.add_squares(&r.trace);
    }
    trace.sqrt_in_place();

    let reg_loss = add_regularizer(model, &mut grads)?;
    let total = data_loss + reg_loss;
    if !total.is_finite() {
        return Err(non_finite("total loss".into()));
    }
    Ok((
        LossReport {
            data_loss,
            reg_loss,
            total,
        },
        grads,
        trace,
    ))
}

/// Full (untruncated) BPTT on one batch.
pub fn bptt(batch: &CopyBatch, model: &ModelParams) -> Result<(LossReport, ModelGrads)> {
    let (report, grads, _) = forward_backward(batch, model, Execution::Sequential)?;
    Ok((report, grads))
}

/// Loss only; the forward half of [`bptt`].
pub fn loss(batch: &CopyBatch, model: &ModelParams) -> Result<LossReport> {
    Ok(bptt(batch, model)?.0)
}

pub fn gradient_norm_trace(batch: &CopyBatch, model: &ModelParams) -> Result<NormTrace> {
    Ok(forward_backward(batch, model, Execution::Sequential)?.2)
}

/// Logits at every step of every sequence.
pub fn predict(batch: &CopyBatch, model: &ModelParams) -> Result<Vec<Vec<Vec<f64>>>> {
    let cell = &model.cell;
    let n = cell.hidden_size();
    (0..batch.batch_size)
        .map(|b| {
            let mut state = vec![0.0; cell.state_size()];
            (0..batch.seq_len)
                .map(|t| {
                    state = cell.step(&state, batch.input(b, t))?.0;
                    model.output.logits(&state[..n])
                })
                .collect()
        })
        .collect()
}

/// Validates `lr` and the gradient layout, returning the flattened gradient.
fn checked_gradient<P, G>(params: &P, grads: &G, lr: f64) -> Result<Vec<f64>>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    if !lr.is_finite() || lr < 0.0 {
        return Err(DizzyError::InvalidConfig(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut grad_layout = Vec::new();
    let mut bad_group = None;
    grads.visit(&mut |name, g| {
        if bad_group.is_none() && g.iter().any(|v| !v.is_finite()) {
            bad_group = Some(name.to_string());
        }
        grad_layout.push((name.to_string(), g.len()));
    });
    if let Some(group) = bad_group {
        return Err(DizzyError::NonFiniteGradient { group });
    }
    let mut param_layout = Vec::new();
    params.visit(&mut |name, p| param_layout.push((name.to_string(), p.len())));
    if param_layout != grad_layout {
        return Err(DizzyError::InvalidConfig("gradient layout does not match parameters".into()));
    }
    Ok(grads.flatten())
}

/// `p ← p − lr · g` for every parameter, including rotation angles and
/// singular values. Parameters and gradients must share a layout.
pub fn sgd_step<P, G>(params: &mut P, grads: &G, lr: f64) -> Result<()>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    let g = checked_gradient(params, grads, lr)?;
    params.add_scaled_flat(&g, -lr);
    Ok(())
}

/// First and second moment estimates for [`adam_step`], one entry per
/// flattened parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }
}

/// Bias-corrected Adam update with step size `lr`.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut AdamState, lr: f64) -> Result<()>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    let g = checked_gradient(params, grads, lr)?;
    check_len("optimizer state", state.m.len(), g.len())?;
    state.steps += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.steps);
    let c2 = 1.0 - b2.powi(state.steps);
    let mut delta = vec![0.0; g.len()];
    for i in 0..g.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        delta[i] = (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + state.epsilon);
    }
    params.add_scaled_flat(&delta, -lr);
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = DizzyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(DizzyError::InvalidConfig(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(num_params)),
        }
    }

    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, lr: f64) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam(state) => adam_step(params, grads, state, lr),
        }
    }
}

/// Lower bound on the denominator of the relative error, so that
/// coordinates whose true gradient is ~0 are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    /// Central-difference estimate per coordinate; NaN where skipped.
    pub numeric: Vec<f64>,
    /// Coordinates whose probes crossed an activation kink.
    pub skipped: Vec<usize>,
}

fn fd_core<F>(mut eval: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<bool>)>,
{
    check_len("analytic gradient", params.len(), analytic.len())?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(DizzyError::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let (first, pattern) = eval(params)?;
    let (second, _) = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(DizzyError::NonDeterministic { first, second });
    }
    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_index: 0,
        numeric: Vec::with_capacity(params.len()),
        skipped: Vec::new(),
    };
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (plus, plus_pattern) = eval(&probe)?;
        probe[i] = params[i] - eps;
        let (minus, minus_pattern) = eval(&probe)?;
        probe[i] = params[i];
        if plus_pattern != pattern || minus_pattern != pattern {
            report.skipped.push(i);
            report.numeric.push(f64::NAN);
            continue;
        }
        let fd = (plus - minus) / (2.0 * eps);
        let rel = relative_error(analytic[i], fd);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - fd).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.numeric.push(fd);
    }
    Ok(report)
}

/// Compares `analytic` against central differences
/// `(L(p + ε e_i) − L(p − ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    fd_core(|p| Ok((loss_fn(p)?, Vec::new())), params, analytic, eps)
}

/// Worst absolute and relative error per parameter group, in first-seen
/// order. Skipped (NaN) coordinates are ignored.
pub fn group_errors(groups: &[String], analytic: &[f64], numeric: &[f64]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64)> = Vec::new();
    for ((group, a), n) in groups.iter().zip(analytic).zip(numeric) {
        let (abs, rel) = if n.is_nan() { (0.0, 0.0) } else { ((a - n).abs(), relative_error(*a, *n)) };
        match out.iter_mut().find(|(g, _, _)| g == group) {
            Some(entry) => {
                entry.1 = entry.1.max(abs);
                entry.2 = entry.2.max(rel);
            }
            None => out.push((group.clone(), abs, rel)),
        }
    }
    out
}

/// Sign pattern of every piecewise-linear activation over the batch.
pub fn activation_pattern(batch: &CopyBatch, model: &ModelParams) -> Result<Vec<bool>> {
    let cell = &model.cell;
    let mut pattern = Vec::new();
    for b in 0..batch.batch_size {
        let mut state = vec![0.0; cell.state_size()];
        for t in 0..batch.seq_len {
            let (next, cache) = cell.step(&state, batch.input(b, t))?;
            pattern.extend(cache.kink_pattern());
            state = next;
        }
    }
    Ok(pattern)
}

/// Finite-difference check of [`bptt`] gradients over every model
/// parameter. Coordinates whose probes flip an `|·|` or ReLU branch are
/// reported in `skipped` instead of being compared.
pub fn check_model_gradients(batch: &CopyBatch, model: &ModelParams, eps: f64) -> Result<(FdReport, Vec<(String, f64, f64)>)> {
    let (_, grads) = bptt(batch, model)?;
    let analytic = grads.flatten();
    let base = model.flatten();
    let mut probe = model.clone();
    let report = fd_core(
        |p| {
            probe.set_flat(p);
            Ok((loss(batch, &probe)?.total, activation_pattern(batch, &probe)?))
        },
        &base,
        &analytic,
        eps,
    )?;
    let groups = group_errors(&model.coordinate_groups(), &analytic, &report.numeric);
    Ok((report, groups))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::copy_task::{generate_copy_batch, CopyTaskConfig};
    use crate::model::{CellKind, ModelShape};

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = vec![vec![0.3; 10]; 4];
        let (loss, grads) = softmax_cross_entropy(&logits, &[1, 2, 3, 4], &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
        assert!(grads[2].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut logits = vec![0.0; 5];
        logits[2] = 800.0;
        let (loss, _) = softmax_cross_entropy(&[logits], &[2], &[1.0]).unwrap();
        assert!(loss.abs() < 1e-300 || loss == 0.0);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        assert!(matches!(
            softmax_cross_entropy(&[vec![0.0; 3]], &[0], &[0.0]),
            Err(DizzyError::DegenerateMask)
        ));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let targets = [4, 0, 2];
        let mask = [1.0, 0.0, 1.0];
        let (_, grads) = softmax_cross_entropy(&logits, &targets, &mask).unwrap();
        let flat: Vec<f64> = logits.iter().flatten().cloned().collect();
        let analytic: Vec<f64> = grads.iter().flatten().cloned().collect();
        let report = finite_difference_check(
            |p| {
                let l: Vec<Vec<f64>> = p.chunks(6).map(|c| c.to_vec()).collect();
                Ok(softmax_cross_entropy(&l, &targets, &mask)?.0)
            },
            &flat,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(report.max_abs_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn fd_check_is_exact_for_linear_and_quadratic_losses() {
        let c = [0.5, -2.0, 3.25];
        let p = [1.0, 2.0, -1.0];
        for eps in [1e-3, 1e-5, 1e-1] {
            let r = finite_difference_check(|p| Ok(p.iter().zip(&c).map(|(a, b)| a * b).sum()), &p, &c, eps).unwrap();
            assert!(r.max_abs_error <= 1e-10, "{r:?}");
        }
        let r = finite_difference_check(|p| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>()), &p, &p, 1e-4).unwrap();
        assert!(r.max_abs_error <= 1e-9);
    }

    #[test]
    fn fd_check_detects_nondeterminism() {
        let mut calls = 0.0;
        let result = finite_difference_check(
            |_| {
                calls += 1.0;
                Ok(calls)
            },
            &[0.0],
            &[0.0],
            1e-5,
        );
        assert!(matches!(result, Err(DizzyError::NonDeterministic { .. })));
    }

    #[test]
    fn sgd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let model = ModelParams::init(
            CellKind::DizzySvd,
            ModelShape {
                hidden_size: 4,
                input_size: 3,
                num_classes: 2,
                rotations: 2,
            },
            None,
            &mut rng,
        )
        .unwrap();
        let mut grads = model.zero_grads();
        grads.set_flat(&vec![1.0; grads.num_params()]);
        let mut same = model.clone();
        sgd_step(&mut same, &grads, 0.0).unwrap();
        assert_eq!(same.flatten(), model.flatten());

        let mut stepped = model.clone();
        sgd_step(&mut stepped, &grads, 0.5).unwrap();
        for (a, b) in stepped.flatten().iter().zip(model.flatten()) {
            assert_eq!(*a, b - 0.5);
        }

        // L = ½p², p = 1, lr = 1 → p = 0
        let mut quad = crate::linear_ops::OrthogonalOp::new(2, vec![crate::rotations::PackedRotation::new(2, vec![(0, 1)], vec![1.0]).unwrap()]).unwrap();
        let g = crate::linear_ops::OrthogonalGrads { angles: vec![vec![1.0]] };
        sgd_step(&mut quad, &g, 1.0).unwrap();
        assert_eq!(quad.rounds()[0].angles(), &[0.0]);

        grads.set_flat(&vec![f64::NAN; grads.num_params()]);
        assert!(matches!(sgd_step(&mut stepped, &grads, 0.1), Err(DizzyError::NonFiniteGradient { .. })));
        assert!(sgd_step(&mut stepped, &model.zero_grads(), -1.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut op = crate::linear_ops::OrthogonalOp::new(
            4,
            vec![crate::rotations::PackedRotation::new(4, vec![(0, 1), (2, 3)], vec![0.5, -0.25]).unwrap()],
        )
        .unwrap();
        let g = crate::linear_ops::OrthogonalGrads {
            angles: vec![vec![3.0, -0.002]],
        };
        let mut state = AdamState::new(2);
        adam_step(&mut op, &g, &mut state, 0.01).unwrap();
        assert!((op.rounds()[0].angles()[0] - 0.49).abs() < 1e-9);
        assert!((op.rounds()[0].angles()[1] + 0.24).abs() < 1e-6);
        assert_eq!(state.steps(), 1);
        assert!(adam_step(&mut op, &g, &mut AdamState::new(3), 0.01).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // L = ½‖p − c‖² over the angles of a single packed rotation.
        let c = [0.7, -1.1];
        let mut op = crate::linear_ops::OrthogonalOp::new(
            4,
            vec![crate::rotations::PackedRotation::new(4, vec![(0, 1), (2, 3)], vec![0.0, 0.0]).unwrap()],
        )
        .unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        for _ in 0..2000 {
            let p = op.flatten();
            let g = crate::linear_ops::OrthogonalGrads {
                angles: vec![p.iter().zip(&c).map(|(p, c)| p - c).collect()],
            };
            opt.step(&mut op, &g, 0.01).unwrap();
        }
        for (p, c) in op.flatten().iter().zip(c) {
            assert!((p - c).abs() < 1e-3, "{p} vs {c}");
        }
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn single_step_bptt_reduces_to_cell_and_loss_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let model = ModelParams::init(
            CellKind::DizzyOrtho,
            ModelShape {
                hidden_size: 4,
                input_size: 3,
                num_classes: 3,
                rotations: 3,
            },
            None,
            &mut rng,
        )
        .unwrap();
        let batch = CopyBatch::new(1, 1, 3, 3, vec![0.0, 1.0, 0.0], vec![2], vec![1.0]).unwrap();
        let (report, grads) = bptt(&batch, &model).unwrap();

        let CellParams::Dizzy(cell) = &model.cell else { unreachable!() };
        let (h, cache) = cell.forward(&[0.0; 4], &[0.0, 1.0, 0.0]).unwrap();
        let logits = model.output.logits(&h).unwrap();
        let (l, g_logits) = softmax_cross_entropy(&[logits], &[2], &[1.0]).unwrap();
        assert_eq!(report.data_loss, l);
        let mut g_h = vec![0.0; 4];
        model.output.w.matvec_transpose_add(&g_logits[0], &mut g_h).unwrap();
        let (_, _, cell_grads) = cell.backward(&g_h, &cache).unwrap();
        assert_eq!(grads.cell, CellGrads::Dizzy(cell_grads));
        assert_eq!(grads.output_b, g_logits[0]);
    }

    #[test]
    fn identical_sequences_average_to_single_sequence_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cfg = CopyTaskConfig {
            num_symbols: 3,
            copy_length: 2,
            lag: 3,
            batch_size: 1,
        };
        let single = generate_copy_batch(&cfg, &mut rng).unwrap();
        let mut doubled = single.clone();
        doubled.batch_size = 3;
        doubled.inputs = single.inputs.repeat(3);
        doubled.targets = single.targets.repeat(3);
        doubled.mask = single.mask.repeat(3);
        for kind in CellKind::ALL {
            let model = ModelParams::init(
                kind,
                ModelShape {
                    hidden_size: 4,
                    input_size: 5,
                    num_classes: 3,
                    rotations: 2,
                },
                None,
                &mut rng,
            )
            .unwrap();
            let (r1, g1) = bptt(&single, &model).unwrap();
            let (r3, g3) = bptt(&doubled, &model).unwrap();
            assert!((r1.total - r3.total).abs() <= 1e-14);
            for (a, b) in g1.flatten().iter().zip(g3.flatten()) {
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn parallel_execution_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cfg = CopyTaskConfig {
            num_symbols: 4,
            copy_length: 3,
            lag: 5,
            batch_size: 6,
        };
        let batch = generate_copy_batch(&cfg, &mut rng).unwrap();
        let model = ModelParams::init(
            CellKind::DizzySvd,
            ModelShape {
                hidden_size: 8,
                input_size: 6,
                num_classes: 4,
                rotations: 4,
            },
            Some(0.3),
            &mut rng,
        )
        .unwrap();
        let (ra, ga, ta) = forward_backward(&batch, &model, Execution::Sequential).unwrap();
        let (rb, gb, tb) = forward_backward(&batch, &model, Execution::Parallel).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ga, gb);
        assert_eq!(ta, tb);
    }

    #[test]
    fn non_finite_states_name_the_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut model = ModelParams::init(
            CellKind::Irnn,
            ModelShape {
                hidden_size: 4,
                input_size: 5,
                num_classes: 3,
                rotations: 1,
            },
            None,
            &mut rng,
        )
        .unwrap();
        model.cell.visit_mut(&mut |name, v| {
            if name == "cell.b" {
                v.iter_mut().for_each(|x| *x = f64::MAX);
            }
        });
        let cfg = CopyTaskConfig {
            num_symbols: 3,
            copy_length: 1,
            lag: 4,
            batch_size: 1,
        };
        let batch = generate_copy_batch(&cfg, &mut rng).unwrap();
        match bptt(&batch, &model) {
            Err(DizzyError::NumericOverflow { stage }) => assert!(stage.contains("cell forward at step 1"), "{stage}"),
            other => panic!("expected overflow, got {other:?}"),
        }
    }
}
