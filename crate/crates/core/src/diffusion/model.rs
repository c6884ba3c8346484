use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numkit::{Fnv, Matrix, Mlp, MlpVars, RngStream, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub class_dim: usize,
    /// Number of diffusion steps the time embedding is normalized by.
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, num_classes: usize, steps: usize) -> Self {
        Self { data_dim, num_classes, hidden: alloc::vec![128, 128, 128], time_dim: 32, class_dim: 16, steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.num_classes == 0 || self.steps == 0 {
            return Err(Error::config("denoiser needs data_dim, num_classes and steps >= 1"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be even and non-zero"));
        }
        if self.class_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("class_dim and hidden widths must be non-zero"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.data_dim + self.time_dim + self.class_dim
    }
}

/// Conditional noise predictor `eps(x_t, t, c)`.
///
/// The class embedding table has `num_classes + 1` rows; the last row is the
/// null token used for the unconditional prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub class_embedding: Matrix,
    pub net: Mlp,
}

/// Tape handles for a bound [`DenoiserModel`].
#[derive(Clone, Debug)]
pub struct DenoiserVars {
    pub class_embedding: Var,
    pub net: MlpVars,
}

impl DenoiserVars {
    /// Handles in [`DenoiserModel::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = alloc::vec![self.class_embedding];
        v.extend(self.net.all());
        v
    }
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut sizes = alloc::vec![config.input_width()];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(config.data_dim);
        let net = Mlp::new(&sizes, rng, true)?;
        let mut class_embedding = Matrix::zeros(config.num_classes + 1, config.class_dim);
        for v in class_embedding.as_mut_slice() {
            *v = rng.normal();
        }
        Ok(Self { config, class_embedding, net })
    }

    pub fn null_token(&self) -> usize {
        self.config.num_classes
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// Sinusoidal embedding of `t / T`, frequencies log-spaced in `[1, 1000]`.
    pub fn time_embedding(&self, ts: &[usize]) -> Matrix {
        let half = self.config.time_dim / 2;
        let steps = self.config.steps as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| {
                let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
                libm::exp(frac * libm::log(1000.0))
            })
            .collect();
        let mut out = Matrix::zeros(ts.len(), self.config.time_dim);
        for (r, &t) in ts.iter().enumerate() {
            let pos = t as f64 / steps;
            let row = out.row_mut(r);
            for (i, f) in freqs.iter().enumerate() {
                row[i] = libm::sin(pos * f);
                row[half + i] = libm::cos(pos * f);
            }
        }
        out
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&c| c > self.config.num_classes) {
            Some(&c) => Err(Error::Range { what: "class token", value: c, lo: 0, hi: self.config.num_classes }),
            None => Ok(()),
        }
    }

    /// Embedding rows for the labels (the null token is allowed).
    pub fn class_embeddings(&self, labels: &[usize]) -> Result<Matrix> {
        self.check_labels(labels)?;
        Ok(self.class_embedding.select_rows(labels))
    }

    fn check_batch(&self, x: &Matrix, n: usize) -> Result<()> {
        if x.cols() != self.config.data_dim || x.rows() != n {
            return Err(Error::Dimension { op: "denoiser input", expected: (n, self.config.data_dim), got: x.shape() });
        }
        Ok(())
    }

    /// Noise prediction with every row at timestep `t`.
    pub fn predict(&self, x: &Matrix, t: usize, labels: &[usize]) -> Result<Matrix> {
        let emb = self.class_embeddings(labels)?;
        self.predict_with_embedding(x, &alloc::vec![t; x.rows()], &emb)
    }

    /// Noise prediction from explicit conditioning embeddings (one row per
    /// sample) and per-row timesteps.
    pub fn predict_with_embedding(&self, x: &Matrix, ts: &[usize], emb: &Matrix) -> Result<Matrix> {
        self.check_batch(x, ts.len())?;
        emb.ensure_shape("conditioning embedding", (x.rows(), self.config.class_dim))?;
        let input = Matrix::hcat(&[x, &self.time_embedding(ts), emb])?;
        self.net.forward(&input)
    }

    /// Binds parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> DenoiserVars {
        DenoiserVars { class_embedding: tape.leaf(self.class_embedding.clone()), net: self.net.bind(tape) }
    }

    /// Binds parameters as constants (input derivatives only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> DenoiserVars {
        DenoiserVars { class_embedding: tape.constant(self.class_embedding.clone()), net: self.net.bind_frozen(tape) }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &DenoiserVars, x: Var, ts: &[usize], labels: &[usize]) -> Result<Var> {
        self.check_labels(labels)?;
        let emb = tape.gather_rows(vars.class_embedding, labels)?;
        self.forward_tape_with_embedding(tape, vars, x, ts, emb)
    }

    pub fn forward_tape_with_embedding(&self, tape: &mut Tape, vars: &DenoiserVars, x: Var, ts: &[usize], emb: Var) -> Result<Var> {
        self.check_batch(tape.value(x), ts.len())?;
        let temb = tape.constant(self.time_embedding(ts));
        let input = tape.hcat(&[x, temb, emb])?;
        self.net.forward_tape(tape, &vars.net, input)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = alloc::vec![&self.class_embedding];
        p.extend(self.net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = alloc::vec![&mut self.class_embedding];
        p.extend(self.net.params_mut());
        p
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.shape()).collect()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.class_embedding.checksum());
        self.net.hash_into(&mut h);
        h.finish()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Anything that predicts noise for a batch; lets loss estimates run on
/// analytic stand-ins as well as the network.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &Matrix, ts: &[usize], labels: &[usize]) -> Result<Matrix>;
}

impl EpsPredictor for DenoiserModel {
    fn predict_eps(&self, x_t: &Matrix, ts: &[usize], labels: &[usize]) -> Result<Matrix> {
        let emb = self.class_embeddings(labels)?;
        self.predict_with_embedding(x_t, ts, &emb)
    }
}
