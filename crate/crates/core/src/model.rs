//! Full sequence model: a recurrent cell followed by a dense softmax readout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    Activation, CellGrads, CellParams, DizzyCellParams, InputWeights, LstmCellParams, RecurrentCell, RecurrentWeights,
    VanillaCellParams,
};
use crate::dense::Matrix;
use crate::error::{check_len, DizzyError, Result};
use crate::linear_ops::{OrthogonalOp, SvdOp};
use crate::params::Parameters;
use crate::rotations::round_robin_schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    DizzyOrtho,
    DizzySvd,
    Vanilla,
    Irnn,
    Lstm,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::DizzyOrtho,
        CellKind::DizzySvd,
        CellKind::Vanilla,
        CellKind::Irnn,
        CellKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::DizzyOrtho => "dizzy_ortho",
            CellKind::DizzySvd => "dizzy_svd",
            CellKind::Vanilla => "vanilla",
            CellKind::Irnn => "irnn",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn is_dizzy(self) -> bool {
        matches!(self, CellKind::DizzyOrtho | CellKind::DizzySvd)
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = DizzyError;

    fn from_str(s: &str) -> Result<Self> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DizzyError::InvalidConfig(format!("unknown cell kind `{s}`")))
    }
}

/// Sizes needed to build a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub hidden_size: usize,
    pub input_size: usize,
    pub num_classes: usize,
    /// Packed rotations per orthogonal operator (Dizzy cells only).
    pub rotations: usize,
}

/// `logits = W h + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl OutputLayer {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        check_len("output bias", w.rows(), b.len())?;
        Ok(OutputLayer { w, b })
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.b.clone();
        self.w.matvec_add(h, &mut out)?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub cell: CellParams,
    pub output: OutputLayer,
    /// Singular-value penalty `λ`; `None` disables the regularizer.
    pub sv_lambda: Option<f64>,
}

impl ModelParams {
    pub fn new(cell: CellParams, output: OutputLayer, sv_lambda: Option<f64>) -> Result<Self> {
        check_len("output layer width", cell.hidden_size(), output.w.cols())?;
        if let Some(l) = sv_lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(DizzyError::InvalidConfig(format!("λ must be finite and non-negative, got {l}")));
            }
        }
        Ok(ModelParams { cell, output, sv_lambda })
    }

    /// Fresh model of the given kind.
    ///
    /// Rotation angles are uniform on `[-π, π)` and singular values start at
    /// one, and Dizzy biases are uniform on `[-1, 1)`. Square Dizzy input
    /// transforms use packed rotations; otherwise the input transform is a
    /// dense Gaussian matrix. The vanilla cell starts
    /// from a random orthogonal recurrence, the IRNN from the identity, and
    /// the LSTM forget-gate bias from one.
    pub fn init<R: Rng + ?Sized>(kind: CellKind, shape: ModelShape, sv_lambda: Option<f64>, rng: &mut R) -> Result<Self> {
        let ModelShape {
            hidden_size: n,
            input_size,
            num_classes,
            rotations,
        } = shape;
        if n < 2 || input_size == 0 || num_classes == 0 {
            return Err(DizzyError::InvalidConfig(format!(
                "model needs hidden size >= 2 and nonzero input/class counts (got {n}, {input_size}, {num_classes})"
            )));
        }
        let input_std = 1.0 / (n as f64).sqrt();
        let cell = match kind {
            CellKind::DizzyOrtho | CellKind::DizzySvd => {
                let schedule = round_robin_schedule(n)?;
                let w_h = if kind == CellKind::DizzyOrtho {
                    RecurrentWeights::Orthogonal(OrthogonalOp::random(&schedule, rotations, rng)?)
                } else {
                    RecurrentWeights::Svd(SvdOp::random(n, rotations, rng)?)
                };
                let w_x = if input_size == n {
                    InputWeights::Orthogonal(OrthogonalOp::random(&schedule, rotations, rng)?)
                } else {
                    InputWeights::Dense(Matrix::random_normal(n, input_size, input_std, rng))
                };
                let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                CellParams::Dizzy(DizzyCellParams::new(w_h, w_x, b)?)
            }
            CellKind::Vanilla | CellKind::Irnn => {
                let (w_h, activation) = if kind == CellKind::Vanilla {
                    let schedule = round_robin_schedule(n)?;
                    (OrthogonalOp::random(&schedule, schedule.len(), rng)?.materialize(), Activation::Tanh)
                } else {
                    (Matrix::identity(n), Activation::Relu)
                };
                let w_x = Matrix::random_normal(n, input_size, input_std, rng);
                CellParams::Vanilla(VanillaCellParams::new(w_h, w_x, vec![0.0; n], activation)?)
            }
            CellKind::Lstm => {
                let bound = 1.0 / (n as f64).sqrt();
                let w_x = Matrix::random_uniform(4 * n, input_size, bound, rng);
                let w_h = Matrix::random_uniform(4 * n, n, bound, rng);
                let mut b = vec![0.0; 4 * n];
                b[n..2 * n].iter_mut().for_each(|v| *v = 1.0);
                CellParams::Lstm(LstmCellParams::new(w_x, w_h, b)?)
            }
        };
        let output = OutputLayer::new(
            Matrix::random_normal(num_classes, n, 1.0 / (n as f64).sqrt(), rng),
            vec![0.0; num_classes],
        )?;
        ModelParams::new(cell, output, sv_lambda)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            cell: self.cell.zero_grads(),
            output_w: Matrix::zeros(self.output.w.rows(), self.output.w.cols()),
            output_b: vec![0.0; self.output.b.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGrads {
    pub cell: CellGrads,
    pub output_w: Matrix,
    pub output_b: Vec<f64>,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        let flat = other.flatten();
        self.add_scaled_flat(&flat, 1.0);
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.cell.visit(f);
        f("out.w", self.output.w.data());
        f("out.b", &self.output.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.cell.visit_mut(f);
        f("out.w", self.output.w.data_mut());
        f("out.b", &mut self.output.b);
    }
}

impl Parameters for ModelGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.cell.visit(f);
        f("out.w", self.output_w.data());
        f("out.b", &self.output_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.cell.visit_mut(f);
        f("out.w", self.output_w.data_mut());
        f("out.b", &mut self.output_b);
    }
}
