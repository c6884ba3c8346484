use alloc::vec::Vec;

use super::tape::{silu, Tape, Var};
use super::{Fnv, Matrix, RngStream};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let std = libm::sqrt(1.0 / fan_in.max(1) as f64);
        let mut weight = Matrix::zeros(fan_in, fan_out);
        for v in weight.as_mut_slice() {
            *v = std * rng.normal();
        }
        Self { weight, bias: Matrix::zeros(1, fan_out) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Matrix::zeros(fan_in, fan_out), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row_broadcast(&self.bias)
    }
}

/// Multi-layer perceptron with SiLU between layers and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Tape handles for an [`Mlp`]'s parameters, in `params()` order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`. With `zero_head` the final layer starts at
    /// zero, so every output is identical before training.
    pub fn new(sizes: &[usize], rng: &mut RngStream, zero_head: bool) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config("MLP needs at least input and output sizes, all non-zero"));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| if zero_head && i == last { Linear::zeros(w[0], w[1]) } else { Linear::new(w[0], w[1], rng) })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.layers.len() + 1);
        s.push(self.input_dim());
        s.extend(self.layers.iter().map(|l| l.weight.cols()));
        s
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_prefix(x, self.layers.len(), false)
    }

    /// Runs the first `n` layers. With `activate_last` the SiLU is applied
    /// after layer `n` too (encoder use).
    pub fn forward_prefix(&self, x: &Matrix, n: usize, activate_last: bool) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().take(n).enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < n || activate_last {
                h.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.leaf(l.weight.clone()));
            biases.push(tape.leaf(l.bias.clone()));
        }
        MlpVars { weights, biases }
    }

    /// Parameters as constants (no gradient), for input-only derivatives.
    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.constant(l.weight.clone()));
            biases.push(tape.constant(l.bias.clone()));
        }
        MlpVars { weights, biases }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        self.forward_tape_prefix(tape, vars, x, self.layers.len(), false)
    }

    pub fn forward_tape_prefix(&self, tape: &mut Tape, vars: &MlpVars, x: Var, n: usize, activate_last: bool) -> Result<Var> {
        let mut h = x;
        for i in 0..n.min(self.layers.len()) {
            let z = tape.matmul(h, vars.weights[i])?;
            h = tape.add_row(z, vars.biases[i])?;
            if i + 1 < n || activate_last {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn hash_into(&self, h: &mut Fnv) {
        for p in self.params() {
            h.write_u64(p.checksum());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a flat list of parameter matrices.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn apply(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("optimizer: parameter/gradient count mismatch"));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-self.lr, g)?;
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as f64;
                let bc1 = 1.0 - libm::pow(ADAM_B1, t);
                let bc2 = 1.0 - libm::pow(ADAM_B2, t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    p.ensure_same_shape("adam", g)?;
                    let m = self.m[i].as_mut_slice();
                    let v = self.v[i].as_mut_slice();
                    for (j, (pv, &gv)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                        m[j] = ADAM_B1 * m[j] + (1.0 - ADAM_B1) * gv;
                        v[j] = ADAM_B2 * v[j] + (1.0 - ADAM_B2) * gv * gv;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *pv -= self.lr * mh / (libm::sqrt(vh) + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = RngStream::new(1);
        let mlp = Mlp::new(&[3, 8, 8, 2], &mut rng, false).unwrap();
        let x = crate::numkit::gauss(&mut rng, 5, 3);
        let plain = mlp.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = mlp.forward_tape(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out), &plain);

        let enc = mlp.forward_prefix(&x, 2, true).unwrap();
        let out = mlp.forward_tape_prefix(&mut tape, &vars, xv, 2, true).unwrap();
        assert_eq!(tape.value(out), &enc);
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut rng = RngStream::new(1);
        let mlp = Mlp::new(&[2, 4, 3], &mut rng, true).unwrap();
        let out = mlp.forward(&Matrix::filled(4, 2, 1.5)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Matrix::row_vector(&[1.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        opt.apply(&mut [&mut p], &[Matrix::row_vector(&[2.0, -2.0])]).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 2.0]);
    }
}
