//! Recurrent cells behind one interface: the rotation-parameterized Dizzy
//! cell plus vanilla (tanh), IRNN (ReLU, identity recurrence) and LSTM
//! baselines.

use serde::{Deserialize, Serialize};

use crate::dense::Matrix;
use crate::error::{check_len, DizzyError, Result};
use crate::linear_ops::{ForwardCache, OrthogonalGrads, OrthogonalOp, SvdGrads, SvdOp};
use crate::params::Parameters;

/// Per-coordinate derivative of an element-wise nonlinearity, recorded on
/// the forward pass. For `abs` the entries are `±1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignPattern(Vec<f64>);

impl SignPattern {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Element-wise `|x|`, with `sign(0) = +1`.
pub fn abs_forward(x: &[f64]) -> (Vec<f64>, SignPattern) {
    let signs = x.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    (x.iter().map(|v| v.abs()).collect(), SignPattern(signs))
}

/// `sign(x) ⊙ g_y`. Only flips signs, so the norm is unchanged bit-for-bit.
pub fn abs_backward(g_y: &[f64], signs: &SignPattern) -> Vec<f64> {
    assert_eq!(g_y.len(), signs.0.len(), "sign pattern from a different forward pass");
    g_y.iter().zip(&signs.0).map(|(g, s)| g * s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Abs,
    Relu,
}

impl Nonlinearity {
    #[inline]
    fn apply(self, v: f64) -> (f64, f64) {
        match self {
            Nonlinearity::Abs => {
                if v < 0.0 {
                    (-v, -1.0)
                } else {
                    (v, 1.0)
                }
            }
            Nonlinearity::Relu => {
                if v > 0.0 {
                    (v, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

/// Interface shared by every cell kind.
///
/// The recurrent state is a flat vector of [`state_size`](Self::state_size)
/// entries whose first [`hidden_size`](Self::hidden_size) entries are the
/// hidden output `h_t` (LSTM appends its memory cell).
pub trait RecurrentCell {
    type Cache;
    type Grads: Parameters + Clone;

    fn hidden_size(&self) -> usize;
    fn input_size(&self) -> usize;
    fn state_size(&self) -> usize {
        self.hidden_size()
    }
    fn zero_grads(&self) -> Self::Grads;

    fn step(&self, state: &[f64], x: &[f64]) -> Result<(Vec<f64>, Self::Cache)>;

    /// Backward through one step: accumulates parameter gradients into
    /// `grads` and returns `(∂L/∂state_{t-1}, ∂L/∂x_t)`.
    fn step_backward(&self, g_state: &[f64], cache: &Self::Cache, grads: &mut Self::Grads) -> Result<(Vec<f64>, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentWeights {
    Orthogonal(OrthogonalOp),
    Svd(SvdOp),
}

impl RecurrentWeights {
    pub fn n(&self) -> usize {
        match self {
            RecurrentWeights::Orthogonal(op) => op.n(),
            RecurrentWeights::Svd(op) => op.n(),
        }
    }

    pub fn materialize(&self) -> Matrix {
        match self {
            RecurrentWeights::Orthogonal(op) => op.materialize(),
            RecurrentWeights::Svd(op) => op.materialize(),
        }
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        match self {
            RecurrentWeights::Orthogonal(_) => None,
            RecurrentWeights::Svd(op) => Some(op.sigma()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputWeights {
    /// Square input transform built from packed rotations.
    Orthogonal(OrthogonalOp),
    /// `n × input_size` trainable matrix.
    Dense(Matrix),
}

impl InputWeights {
    pub fn output_size(&self) -> usize {
        match self {
            InputWeights::Orthogonal(op) => op.n(),
            InputWeights::Dense(m) => m.rows(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            InputWeights::Orthogonal(op) => op.n(),
            InputWeights::Dense(m) => m.cols(),
        }
    }

    pub fn materialize(&self) -> Matrix {
        match self {
            InputWeights::Orthogonal(op) => op.materialize(),
            InputWeights::Dense(m) => m.clone(),
        }
    }
}

/// `h_t = f(W_h h_{t-1} + W_x x_t + b)` with `f = abs` for a Dizzy cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DizzyCellParams {
    w_h: RecurrentWeights,
    w_x: InputWeights,
    b: Vec<f64>,
    nonlinearity: Nonlinearity,
}

impl DizzyCellParams {
    pub fn new(w_h: RecurrentWeights, w_x: InputWeights, b: Vec<f64>) -> Result<Self> {
        Self::with_nonlinearity(w_h, w_x, b, Nonlinearity::Abs)
    }

    pub fn with_nonlinearity(w_h: RecurrentWeights, w_x: InputWeights, b: Vec<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        let n = w_h.n();
        check_len("input transform output", n, w_x.output_size())?;
        check_len("bias", n, b.len())?;
        Ok(DizzyCellParams {
            w_h,
            w_x,
            b,
            nonlinearity,
        })
    }

    pub fn w_h(&self) -> &RecurrentWeights {
        &self.w_h
    }

    pub fn w_x(&self) -> &InputWeights {
        &self.w_x
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn set_nonlinearity(&mut self, nonlinearity: Nonlinearity) {
        self.nonlinearity = nonlinearity;
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut RecurrentWeights, &mut InputWeights, &mut [f64]) {
        (&mut self.w_h, &mut self.w_x, &mut self.b)
    }

    /// Forward step; see [`RecurrentCell::step`].
    pub fn forward(&self, h_prev: &[f64], x_t: &[f64]) -> Result<(Vec<f64>, DizzyCellCache)> {
        self.step(h_prev, x_t)
    }

    /// Backward step returning `(∂L/∂h_{t-1}, ∂L/∂x_t, parameter gradients)`.
    pub fn backward(&self, g_h: &[f64], cache: &DizzyCellCache) -> Result<(Vec<f64>, Vec<f64>, DizzyCellGrads)> {
        let mut grads = self.zero_grads();
        let (g_h_prev, g_x) = self.step_backward(g_h, cache, &mut grads)?;
        Ok((g_h_prev, g_x, grads))
    }
}

#[derive(Clone, Debug)]
pub struct DizzyCellCache {
    x: Vec<f64>,
    w_h: ForwardCache,
    w_x: Option<ForwardCache>,
    pre_activation: Vec<f64>,
    derivative: SignPattern,
}

impl DizzyCellCache {
    pub fn pre_activation(&self) -> &[f64] {
        &self.pre_activation
    }

    pub fn sign_pattern(&self) -> &SignPattern {
        &self.derivative
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentGrads {
    Orthogonal(OrthogonalGrads),
    Svd(SvdGrads),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGrads {
    Orthogonal(OrthogonalGrads),
    Dense(Matrix),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DizzyCellGrads {
    pub w_h: RecurrentGrads,
    pub w_x: InputGrads,
    pub b: Vec<f64>,
}

impl RecurrentCell for DizzyCellParams {
    type Cache = DizzyCellCache;
    type Grads = DizzyCellGrads;

    fn hidden_size(&self) -> usize {
        self.b.len()
    }

    fn input_size(&self) -> usize {
        self.w_x.input_size()
    }

    fn zero_grads(&self) -> DizzyCellGrads {
        DizzyCellGrads {
            w_h: match &self.w_h {
                RecurrentWeights::Orthogonal(op) => RecurrentGrads::Orthogonal(OrthogonalGrads::zeros_like(op)),
                RecurrentWeights::Svd(op) => RecurrentGrads::Svd(SvdGrads::zeros_like(op)),
            },
            w_x: match &self.w_x {
                InputWeights::Orthogonal(op) => InputGrads::Orthogonal(OrthogonalGrads::zeros_like(op)),
                InputWeights::Dense(m) => InputGrads::Dense(Matrix::zeros(m.rows(), m.cols())),
            },
            b: vec![0.0; self.b.len()],
        }
    }

    fn step(&self, h_prev: &[f64], x_t: &[f64]) -> Result<(Vec<f64>, DizzyCellCache)> {
        let n = self.hidden_size();
        check_len("previous hidden state", n, h_prev.len())?;
        check_len("cell input", self.input_size(), x_t.len())?;

        let mut pre = h_prev.to_vec();
        let w_h_cache = match &self.w_h {
            RecurrentWeights::Orthogonal(op) => op.forward_in_place(&mut pre),
            RecurrentWeights::Svd(op) => op.forward_in_place(&mut pre),
        };
        let w_x_cache = match &self.w_x {
            InputWeights::Orthogonal(op) => {
                let mut rotated = x_t.to_vec();
                let cache = op.forward_in_place(&mut rotated);
                crate::dense::add_assign(&mut pre, &rotated);
                Some(cache)
            }
            InputWeights::Dense(m) => {
                m.matvec_add(x_t, &mut pre)?;
                None
            }
        };
        crate::dense::add_assign(&mut pre, &self.b);

        let mut h = Vec::with_capacity(n);
        let mut derivative = Vec::with_capacity(n);
        for &v in &pre {
            let (out, d) = self.nonlinearity.apply(v);
            h.push(out);
            derivative.push(d);
        }
        Ok((
            h,
            DizzyCellCache {
                x: x_t.to_vec(),
                w_h: w_h_cache,
                w_x: w_x_cache,
                pre_activation: pre,
                derivative: SignPattern(derivative),
            },
        ))
    }

    fn step_backward(&self, g_h: &[f64], cache: &DizzyCellCache, grads: &mut DizzyCellGrads) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.hidden_size();
        check_len("hidden gradient", n, g_h.len())?;
        check_len("cached derivative", n, cache.derivative.0.len())?;

        let g_pre: Vec<f64> = g_h.iter().zip(&cache.derivative.0).map(|(g, d)| g * d).collect();
        crate::dense::add_assign(&mut grads.b, &g_pre);

        let mut g_h_prev = g_pre.clone();
        match (&self.w_h, &mut grads.w_h) {
            (RecurrentWeights::Orthogonal(op), RecurrentGrads::Orthogonal(g)) => {
                op.backward_in_place(&mut g_h_prev, &cache.w_h, g)?
            }
            (RecurrentWeights::Svd(op), RecurrentGrads::Svd(g)) => op.backward_in_place(&mut g_h_prev, &cache.w_h, g)?,
            _ => return Err(DizzyError::CacheMismatch("gradient buffer kind differs from W_h kind".into())),
        }

        let g_x = match (&self.w_x, &mut grads.w_x, &cache.w_x) {
            (InputWeights::Orthogonal(op), InputGrads::Orthogonal(g), Some(c)) => {
                let mut g_x = g_pre;
                op.backward_in_place(&mut g_x, c, g)?;
                g_x
            }
            (InputWeights::Dense(m), InputGrads::Dense(g), None) => {
                check_len("cached input", m.cols(), cache.x.len())?;
                g.add_outer(1.0, &g_pre, &cache.x)?;
                let mut g_x = vec![0.0; m.cols()];
                m.matvec_transpose_add(&g_pre, &mut g_x)?;
                g_x
            }
            _ => return Err(DizzyError::CacheMismatch("cache or gradient kind differs from W_x kind".into())),
        };
        Ok((g_h_prev, g_x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// `h_t = act(W_h h_{t-1} + W_x x_t + b)` with dense weights. With ReLU and
/// `W_h = I` at initialization this is the IRNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaCellParams {
    w_h: Matrix,
    w_x: Matrix,
    b: Vec<f64>,
    activation: Activation,
}

impl VanillaCellParams {
    pub fn new(w_h: Matrix, w_x: Matrix, b: Vec<f64>, activation: Activation) -> Result<Self> {
        let n = b.len();
        check_len("recurrent matrix rows", n, w_h.rows())?;
        check_len("recurrent matrix cols", n, w_h.cols())?;
        check_len("input matrix rows", n, w_x.rows())?;
        Ok(VanillaCellParams { w_h, w_x, b, activation })
    }

    pub fn w_h(&self) -> &Matrix {
        &self.w_h
    }

    pub fn w_x(&self) -> &Matrix {
        &self.w_x
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut Matrix, &mut [f64]) {
        (&mut self.w_h, &mut self.w_x, &mut self.b)
    }
}

#[derive(Clone, Debug)]
pub struct VanillaCellCache {
    h_prev: Vec<f64>,
    x: Vec<f64>,
    derivative: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaCellGrads {
    pub w_h: Matrix,
    pub w_x: Matrix,
    pub b: Vec<f64>,
}

impl RecurrentCell for VanillaCellParams {
    type Cache = VanillaCellCache;
    type Grads = VanillaCellGrads;

    fn hidden_size(&self) -> usize {
        self.b.len()
    }

    fn input_size(&self) -> usize {
        self.w_x.cols()
    }

    fn zero_grads(&self) -> VanillaCellGrads {
        VanillaCellGrads {
            w_h: Matrix::zeros(self.w_h.rows(), self.w_h.cols()),
            w_x: Matrix::zeros(self.w_x.rows(), self.w_x.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    fn step(&self, h_prev: &[f64], x_t: &[f64]) -> Result<(Vec<f64>, VanillaCellCache)> {
        let mut pre = self.b.clone();
        self.w_h.matvec_add(h_prev, &mut pre)?;
        self.w_x.matvec_add(x_t, &mut pre)?;
        let mut derivative = Vec::with_capacity(pre.len());
        for v in pre.iter_mut() {
            let (out, d) = match self.activation {
                Activation::Tanh => {
                    let t = v.tanh();
                    (t, 1.0 - t * t)
                }
                Activation::Relu => {
                    if *v > 0.0 {
                        (*v, 1.0)
                    } else {
                        (0.0, 0.0)
                    }
                }
            };
            *v = out;
            derivative.push(d);
        }
        Ok((
            pre,
            VanillaCellCache {
                h_prev: h_prev.to_vec(),
                x: x_t.to_vec(),
                derivative,
            },
        ))
    }

    fn step_backward(&self, g_h: &[f64], cache: &VanillaCellCache, grads: &mut VanillaCellGrads) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("hidden gradient", self.b.len(), g_h.len())?;
        check_len("cached derivative", self.b.len(), cache.derivative.len())?;
        let g_pre: Vec<f64> = g_h.iter().zip(&cache.derivative).map(|(g, d)| g * d).collect();
        crate::dense::add_assign(&mut grads.b, &g_pre);
        grads.w_h.add_outer(1.0, &g_pre, &cache.h_prev)?;
        grads.w_x.add_outer(1.0, &g_pre, &cache.x)?;
        let mut g_h_prev = vec![0.0; self.b.len()];
        self.w_h.matvec_transpose_add(&g_pre, &mut g_h_prev)?;
        let mut g_x = vec![0.0; self.w_x.cols()];
        self.w_x.matvec_transpose_add(&g_pre, &mut g_x)?;
        Ok((g_h_prev, g_x))
    }
}

/// Standard LSTM. Gate rows are stacked `[input, forget, candidate, output]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    w_x: Matrix,
    w_h: Matrix,
    b: Vec<f64>,
}

impl LstmCellParams {
    pub fn new(w_x: Matrix, w_h: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() % 4 != 0 {
            return Err(DizzyError::InvalidConfig("LSTM bias length must be 4 × hidden size".into()));
        }
        let n = b.len() / 4;
        check_len("LSTM input matrix rows", 4 * n, w_x.rows())?;
        check_len("LSTM recurrent matrix rows", 4 * n, w_h.rows())?;
        check_len("LSTM recurrent matrix cols", n, w_h.cols())?;
        Ok(LstmCellParams { w_x, w_h, b })
    }

    pub fn w_x(&self) -> &Matrix {
        &self.w_x
    }

    pub fn w_h(&self) -> &Matrix {
        &self.w_h
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }
}

#[derive(Clone, Debug)]
pub struct LstmCellCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    // Activated gates, stacked like the weight rows.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCellGrads {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl LstmCellParams {
    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut Matrix, &mut [f64]) {
        (&mut self.w_x, &mut self.w_h, &mut self.b)
    }
}

impl RecurrentCell for LstmCellParams {
    type Cache = LstmCellCache;
    type Grads = LstmCellGrads;

    fn hidden_size(&self) -> usize {
        self.b.len() / 4
    }

    fn input_size(&self) -> usize {
        self.w_x.cols()
    }

    fn state_size(&self) -> usize {
        2 * self.hidden_size()
    }

    fn zero_grads(&self) -> LstmCellGrads {
        LstmCellGrads {
            w_x: Matrix::zeros(self.w_x.rows(), self.w_x.cols()),
            w_h: Matrix::zeros(self.w_h.rows(), self.w_h.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    fn step(&self, state: &[f64], x_t: &[f64]) -> Result<(Vec<f64>, LstmCellCache)> {
        let n = self.hidden_size();
        check_len("LSTM state", 2 * n, state.len())?;
        let (h_prev, c_prev) = state.split_at(n);
        let mut z = self.b.clone();
        self.w_x.matvec_add(x_t, &mut z)?;
        self.w_h.matvec_add(h_prev, &mut z)?;
        for (j, v) in z.iter_mut().enumerate() {
            *v = if j / n == 2 { v.tanh() } else { sigmoid(*v) };
        }
        let mut next = vec![0.0; 2 * n];
        let mut tanh_c = vec![0.0; n];
        for k in 0..n {
            let c = z[n + k] * c_prev[k] + z[k] * z[2 * n + k];
            tanh_c[k] = c.tanh();
            next[n + k] = c;
            next[k] = z[3 * n + k] * tanh_c[k];
        }
        Ok((
            next,
            LstmCellCache {
                x: x_t.to_vec(),
                h_prev: h_prev.to_vec(),
                c_prev: c_prev.to_vec(),
                gates: z,
                tanh_c,
            },
        ))
    }

    fn step_backward(&self, g_state: &[f64], cache: &LstmCellCache, grads: &mut LstmCellGrads) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.hidden_size();
        check_len("LSTM state gradient", 2 * n, g_state.len())?;
        check_len("cached gates", 4 * n, cache.gates.len())?;
        let (g_h, g_c) = g_state.split_at(n);
        let z = &cache.gates;
        let mut dz = vec![0.0; 4 * n];
        let mut g_prev = vec![0.0; 2 * n];
        for k in 0..n {
            let (i, f, g, o) = (z[k], z[n + k], z[2 * n + k], z[3 * n + k]);
            let tc = cache.tanh_c[k];
            let g_c_total = g_c[k] + g_h[k] * o * (1.0 - tc * tc);
            dz[k] = g_c_total * g * i * (1.0 - i);
            dz[n + k] = g_c_total * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * n + k] = g_c_total * i * (1.0 - g * g);
            dz[3 * n + k] = g_h[k] * tc * o * (1.0 - o);
            g_prev[n + k] = g_c_total * f;
        }
        crate::dense::add_assign(&mut grads.b, &dz);
        grads.w_x.add_outer(1.0, &dz, &cache.x)?;
        grads.w_h.add_outer(1.0, &dz, &cache.h_prev)?;
        self.w_h.matvec_transpose_add(&dz, &mut g_prev[..n])?;
        let mut g_x = vec![0.0; self.w_x.cols()];
        self.w_x.matvec_transpose_add(&dz, &mut g_x)?;
        Ok((g_prev, g_x))
    }
}

/// Any supported cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellParams {
    Dizzy(DizzyCellParams),
    Vanilla(VanillaCellParams),
    Lstm(LstmCellParams),
}

pub enum CellCache {
    Dizzy(DizzyCellCache),
    Vanilla(VanillaCellCache),
    Lstm(LstmCellCache),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellGrads {
    Dizzy(DizzyCellGrads),
    Vanilla(VanillaCellGrads),
    Lstm(LstmCellGrads),
}

impl CellParams {
    /// Singular-value vectors subject to the regularizer (empty unless the
    /// recurrent transform is an SVD operator).
    pub fn singular_values(&self) -> Vec<&[f64]> {
        match self {
            CellParams::Dizzy(p) => p.w_h.sigma().into_iter().collect(),
            _ => Vec::new(),
        }
    }
}

impl CellCache {
    /// Side of each piecewise-linear kink the step landed on. Smooth
    /// activations report a constant pattern; the LSTM reports nothing.
    pub fn kink_pattern(&self) -> Vec<bool> {
        match self {
            CellCache::Dizzy(c) => c.pre_activation.iter().map(|z| *z >= 0.0).collect(),
            CellCache::Vanilla(c) => c.derivative.iter().map(|d| *d > 0.0).collect(),
            CellCache::Lstm(_) => Vec::new(),
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $p:ident => $body:expr) => {
        match $self {
            CellParams::Dizzy($p) => $body,
            CellParams::Vanilla($p) => $body,
            CellParams::Lstm($p) => $body,
        }
    };
}

fn kind_mismatch() -> DizzyError {
    DizzyError::CacheMismatch("cell cache or gradient buffer belongs to another cell kind".into())
}

impl RecurrentCell for CellParams {
    type Cache = CellCache;
    type Grads = CellGrads;

    fn hidden_size(&self) -> usize {
        dispatch!(self, p => p.hidden_size())
    }

    fn input_size(&self) -> usize {
        dispatch!(self, p => p.input_size())
    }

    fn state_size(&self) -> usize {
        dispatch!(self, p => p.state_size())
    }

    fn zero_grads(&self) -> CellGrads {
        match self {
            CellParams::Dizzy(p) => CellGrads::Dizzy(p.zero_grads()),
            CellParams::Vanilla(p) => CellGrads::Vanilla(p.zero_grads()),
            CellParams::Lstm(p) => CellGrads::Lstm(p.zero_grads()),
        }
    }

    fn step(&self, state: &[f64], x: &[f64]) -> Result<(Vec<f64>, CellCache)> {
        Ok(match self {
            CellParams::Dizzy(p) => {
                let (s, c) = p.step(state, x)?;
                (s, CellCache::Dizzy(c))
            }
            CellParams::Vanilla(p) => {
                let (s, c) = p.step(state, x)?;
                (s, CellCache::Vanilla(c))
            }
            CellParams::Lstm(p) => {
                let (s, c) = p.step(state, x)?;
                (s, CellCache::Lstm(c))
            }
        })
    }

    fn step_backward(&self, g_state: &[f64], cache: &CellCache, grads: &mut CellGrads) -> Result<(Vec<f64>, Vec<f64>)> {
        match (self, cache, grads) {
            (CellParams::Dizzy(p), CellCache::Dizzy(c), CellGrads::Dizzy(g)) => p.step_backward(g_state, c, g),
            (CellParams::Vanilla(p), CellCache::Vanilla(c), CellGrads::Vanilla(g)) => p.step_backward(g_state, c, g),
            (CellParams::Lstm(p), CellCache::Lstm(c), CellGrads::Lstm(g)) => p.step_backward(g_state, c, g),
            _ => Err(kind_mismatch()),
        }
    }
}
