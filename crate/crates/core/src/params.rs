//! Uniform access to trainable values.
//!
//! Parameters and their gradients expose the same sequence of named slices,
//! in the same order. Optimizers, gradient checkers and serialization of
//! gradient reports work on that sequence instead of on each concrete type.

use crate::cells::{
    CellGrads, CellParams, DizzyCellGrads, DizzyCellParams, InputGrads, InputWeights, LstmCellGrads, LstmCellParams,
    RecurrentGrads, RecurrentWeights, VanillaCellGrads, VanillaCellParams,
};
use crate::linear_ops::{OrthogonalGrads, OrthogonalOp, SvdGrads, SvdOp};

pub trait Parameters {
    /// Calls `f(group, values)` for every parameter slice in canonical order.
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));

    /// Mutable counterpart of [`visit`](Self::visit); same order and grouping.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, v| count += v.len());
        count
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    /// Group name of every flattened coordinate.
    fn coordinate_groups(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, v| out.extend(std::iter::repeat(name.to_string()).take(v.len())));
        out
    }

    /// `self += scale · flat`, with `flat` in [`flatten`](Self::flatten) order.
    fn add_scaled_flat(&mut self, flat: &[f64], scale: f64) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter vector has the wrong length");
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            let len = v.len();
            for (p, g) in v.iter_mut().zip(&flat[offset..offset + len]) {
                *p += scale * g;
            }
            offset += len;
        });
    }

    fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter vector has the wrong length");
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            let len = v.len();
            v.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= factor));
    }
}

/// Prefixes group names with `prefix.`.
fn scoped<'a>(prefix: &'a str, f: &'a mut dyn FnMut(&str, &[f64])) -> impl FnMut(&str, &[f64]) + 'a {
    move |name, v| f(&format!("{prefix}.{name}"), v)
}

fn scoped_mut<'a>(prefix: &'a str, f: &'a mut dyn FnMut(&str, &mut [f64])) -> impl FnMut(&str, &mut [f64]) + 'a {
    move |name, v| f(&format!("{prefix}.{name}"), v)
}

impl Parameters for OrthogonalOp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for round in self.rounds() {
            f("angles", round.angles());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.update_angles(|_, a| f("angles", a));
    }
}

impl Parameters for OrthogonalGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for a in &self.angles {
            f("angles", a);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for a in &mut self.angles {
            f("angles", a);
        }
    }
}

impl Parameters for SvdOp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.u().visit(&mut scoped("u", f));
        f("sigma", self.sigma());
        self.v().visit(&mut scoped("v", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.update(|u, sigma, v| {
            u.visit_mut(&mut scoped_mut("u", f));
            f("sigma", sigma);
            v.visit_mut(&mut scoped_mut("v", f));
        });
    }
}

impl Parameters for SvdGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.u.visit(&mut scoped("u", f));
        f("sigma", &self.sigma);
        self.v.visit(&mut scoped("v", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.u.visit_mut(&mut scoped_mut("u", f));
        f("sigma", &mut self.sigma);
        self.v.visit_mut(&mut scoped_mut("v", f));
    }
}

impl Parameters for DizzyCellParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self.w_h() {
            RecurrentWeights::Orthogonal(op) => op.visit(&mut scoped("w_h", f)),
            RecurrentWeights::Svd(op) => op.visit(&mut scoped("w_h", f)),
        }
        match self.w_x() {
            InputWeights::Orthogonal(op) => op.visit(&mut scoped("w_x", f)),
            InputWeights::Dense(m) => f("w_x.dense", m.data()),
        }
        f("b", self.bias());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let (w_h, w_x, b) = self.parts_mut();
        match w_h {
            RecurrentWeights::Orthogonal(op) => op.visit_mut(&mut scoped_mut("w_h", f)),
            RecurrentWeights::Svd(op) => op.visit_mut(&mut scoped_mut("w_h", f)),
        }
        match w_x {
            InputWeights::Orthogonal(op) => op.visit_mut(&mut scoped_mut("w_x", f)),
            InputWeights::Dense(m) => f("w_x.dense", m.data_mut()),
        }
        f("b", b);
    }
}

impl Parameters for DizzyCellGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match &self.w_h {
            RecurrentGrads::Orthogonal(g) => g.visit(&mut scoped("w_h", f)),
            RecurrentGrads::Svd(g) => g.visit(&mut scoped("w_h", f)),
        }
        match &self.w_x {
            InputGrads::Orthogonal(g) => g.visit(&mut scoped("w_x", f)),
            InputGrads::Dense(m) => f("w_x.dense", m.data()),
        }
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match &mut self.w_h {
            RecurrentGrads::Orthogonal(g) => g.visit_mut(&mut scoped_mut("w_h", f)),
            RecurrentGrads::Svd(g) => g.visit_mut(&mut scoped_mut("w_h", f)),
        }
        match &mut self.w_x {
            InputGrads::Orthogonal(g) => g.visit_mut(&mut scoped_mut("w_x", f)),
            InputGrads::Dense(m) => f("w_x.dense", m.data_mut()),
        }
        f("b", &mut self.b);
    }
}

impl Parameters for VanillaCellParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w_h.dense", self.w_h().data());
        f("w_x.dense", self.w_x().data());
        f("b", self.bias());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let (w_h, w_x, b) = self.parts_mut();
        f("w_h.dense", w_h.data_mut());
        f("w_x.dense", w_x.data_mut());
        f("b", b);
    }
}

impl Parameters for VanillaCellGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w_h.dense", self.w_h.data());
        f("w_x.dense", self.w_x.data());
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w_h.dense", self.w_h.data_mut());
        f("w_x.dense", self.w_x.data_mut());
        f("b", &mut self.b);
    }
}

impl Parameters for LstmCellParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w_x.dense", self.w_x().data());
        f("w_h.dense", self.w_h().data());
        f("b", self.bias());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let (w_x, w_h, b) = self.parts_mut();
        f("w_x.dense", w_x.data_mut());
        f("w_h.dense", w_h.data_mut());
        f("b", b);
    }
}

impl Parameters for LstmCellGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w_x.dense", self.w_x.data());
        f("w_h.dense", self.w_h.data());
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w_x.dense", self.w_x.data_mut());
        f("w_h.dense", self.w_h.data_mut());
        f("b", &mut self.b);
    }
}

impl Parameters for CellParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            CellParams::Dizzy(p) => p.visit(&mut scoped("cell", f)),
            CellParams::Vanilla(p) => p.visit(&mut scoped("cell", f)),
            CellParams::Lstm(p) => p.visit(&mut scoped("cell", f)),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            CellParams::Dizzy(p) => p.visit_mut(&mut scoped_mut("cell", f)),
            CellParams::Vanilla(p) => p.visit_mut(&mut scoped_mut("cell", f)),
            CellParams::Lstm(p) => p.visit_mut(&mut scoped_mut("cell", f)),
        }
    }
}

impl Parameters for CellGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            CellGrads::Dizzy(g) => g.visit(&mut scoped("cell", f)),
            CellGrads::Vanilla(g) => g.visit(&mut scoped("cell", f)),
            CellGrads::Lstm(g) => g.visit(&mut scoped("cell", f)),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            CellGrads::Dizzy(g) => g.visit_mut(&mut scoped_mut("cell", f)),
            CellGrads::Vanilla(g) => g.visit_mut(&mut scoped_mut("cell", f)),
            CellGrads::Lstm(g) => g.visit_mut(&mut scoped_mut("cell", f)),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cells::RecurrentCell;
    use crate::dense::Matrix;

    #[test]
    fn params_and_grads_share_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cell = DizzyCellParams::new(
            RecurrentWeights::Svd(SvdOp::random(6, 3, &mut rng).unwrap()),
            InputWeights::Dense(Matrix::zeros(6, 2)),
            vec![0.0; 6],
        )
        .unwrap();
        let grads = cell.zero_grads();
        assert_eq!(cell.coordinate_groups(), grads.coordinate_groups());
        assert_eq!(cell.num_params(), 3 * 3 * 2 + 6 + 12 + 6);
        assert!(cell.coordinate_groups().contains(&"w_h.u.angles".to_string()));
    }

    #[test]
    fn flat_updates_refresh_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut op = OrthogonalOp::random_with_rounds(4, 3, &mut rng).unwrap();
        let before = op.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap().0;
        let zero = vec![0.0; op.num_params()];
        op.set_flat(&zero);
        assert_eq!(op.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap().0, vec![1.0, 0.0, 0.0, 0.0]);
        assert_ne!(before, vec![1.0, 0.0, 0.0, 0.0]);
    }
}
