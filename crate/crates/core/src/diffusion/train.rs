use alloc::vec::Vec;

use super::model::{DenoiserModel, EpsPredictor};
use super::schedule::{forward_noise_rows, NoiseSchedule};
use crate::datagen::LabeledSet;
use crate::error::{Error, Result};
use crate::numkit::{gauss, Matrix, Optimizer, OptimizerKind, RngStream, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a sample's class with the null token.
    pub p_uncond: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 128, learning_rate: 1e-3, p_uncond: 0.1, seed: 0, optimizer: OptimizerKind::Adam }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::config("p_uncond must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: DenoiserModel,
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

/// One Monte-Carlo draw of the denoising objective for a batch.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub x_t: Matrix,
    pub eps: Matrix,
    pub ts: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws rows, timesteps, noise and (possibly dropped) labels.
pub fn noised_batch(data: &LabeledSet, sched: &NoiseSchedule, batch: usize, p_uncond: f64, null_token: usize, rng: &mut RngStream) -> Result<NoisedBatch> {
    let rows: Vec<usize> = (0..batch).map(|_| rng.below(data.len())).collect();
    let ts: Vec<usize> = (0..batch).map(|_| 1 + rng.below(sched.steps())).collect();
    let eps = gauss(rng, batch, data.dim());
    let labels: Vec<usize> = rows
        .iter()
        .map(|&r| if p_uncond > 0.0 && rng.uniform() < p_uncond { null_token } else { data.classes[r] })
        .collect();
    let x0 = data.points.select_rows(&rows);
    let x_t = forward_noise_rows(&x0, &ts, &eps, sched)?;
    Ok(NoisedBatch { x_t, eps, ts, labels })
}

/// Mean over rows of `||eps - pred||^2`.
pub fn denoising_loss(pred: &Matrix, eps: &Matrix) -> Result<f64> {
    let diff = pred.sub(eps)?;
    Ok(diff.sum_sq() / pred.rows().max(1) as f64)
}

/// Monte-Carlo estimate of the denoising objective with `draws` samples and
/// no condition dropping.
pub fn estimate_loss(pred: &impl EpsPredictor, data: &LabeledSet, sched: &NoiseSchedule, draws: usize, rng: &mut RngStream) -> Result<f64> {
    let b = noised_batch(data, sched, draws, 0.0, data.num_classes, rng)?;
    let out = pred.predict_eps(&b.x_t, &b.ts, &b.labels)?;
    denoising_loss(&out, &b.eps)
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(model: &DenoiserModel, batch: &NoisedBatch) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.constant(batch.x_t.clone());
    let out = model.forward_tape(&mut tape, &vars, x, &batch.ts, &batch.labels)?;
    let eps = tape.constant(batch.eps.clone());
    let diff = tape.sub(out, eps)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / batch.ts.len() as f64);
    let value = tape.value(loss).as_slice()[0];
    let grads = tape.grad(loss, &vars.all())?;
    Ok((value, grads))
}

/// Stochastic minimization of the denoising objective, starting from
/// `model`. Classes are dropped to the null token with probability
/// `p_uncond` so the same network serves conditional and unconditional
/// predictions.
pub fn train(model: &DenoiserModel, data: &LabeledSet, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if data.dim() != model.data_dim() {
        return Err(Error::Dimension { op: "train", expected: (data.len(), model.data_dim()), got: data.points.shape() });
    }
    model.check_labels(&data.classes)?;
    if let Some(&c) = data.classes.iter().find(|&&c| c >= model.config.num_classes) {
        return Err(Error::Range { what: "class label", value: c, lo: 0, hi: model.config.num_classes - 1 });
    }

    let mut model = model.clone();
    let mut rng = RngStream::new(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = noised_batch(data, sched, cfg.batch_size, cfg.p_uncond, model.null_token(), &mut rng)?;
        let (loss, grads) = loss_and_grads(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        opt.apply(&mut model.params_mut(), &grads)?;
        losses.push(loss);
    }
    Ok(Trained { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, DenoiserConfig, ScheduleKind};

    struct ZeroModel;

    impl EpsPredictor for ZeroModel {
        fn predict_eps(&self, x_t: &Matrix, _: &[usize], _: &[usize]) -> Result<Matrix> {
            Ok(Matrix::zeros(x_t.rows(), x_t.cols()))
        }
    }

    /// Knows the single data point, so it can invert the forward process.
    struct OracleModel<'a> {
        x0: &'a [f64],
        sched: &'a NoiseSchedule,
    }

    impl EpsPredictor for OracleModel<'_> {
        fn predict_eps(&self, x_t: &Matrix, ts: &[usize], _: &[usize]) -> Result<Matrix> {
            let mut out = x_t.clone();
            for (r, &t) in ts.iter().enumerate() {
                let ab = self.sched.alpha_bar(t);
                for (o, &x0) in out.row_mut(r).iter_mut().zip(self.x0) {
                    *o = (*o - libm::sqrt(ab) * x0) / libm::sqrt(1.0 - ab);
                }
            }
            Ok(out)
        }
    }

    fn single_point_set(d: usize) -> LabeledSet {
        let row: Vec<f64> = (0..d).map(|i| 0.5 - i as f64).collect();
        LabeledSet::new(Matrix::row_vector(&row), alloc::vec![0], None, 1, 1).unwrap()
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let sched = make_schedule(20, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let data = single_point_set(3);
        let oracle = OracleModel { x0: data.points.row(0), sched: &sched };
        let loss = estimate_loss(&oracle, &data, &sched, 256, &mut RngStream::new(1)).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn zero_predictor_loss_is_dimension() {
        let sched = make_schedule(20, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let data = single_point_set(4);
        let loss = estimate_loss(&ZeroModel, &data, &sched, 20_000, &mut RngStream::new(2)).unwrap();
        // chi-square with 4 dof: mean 4, sd of the mean sqrt(8 / 20000) ~ 0.02
        assert!((loss - 4.0).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { p_uncond: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_labels() {
        let sched = make_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut cfg = DenoiserConfig::new(2, 2, 10);
        cfg.hidden = alloc::vec![16];
        let model = DenoiserModel::new(cfg, &mut RngStream::new(0)).unwrap();
        let data = LabeledSet::new(
            Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]).unwrap(),
            alloc::vec![0, 1, 1],
            None,
            2,
            1,
        )
        .unwrap();
        let tc = TrainConfig { steps: 20, batch_size: 8, ..TrainConfig::default() };
        let a = train(&model, &data, &sched, &tc).unwrap();
        let b = train(&model, &data, &sched, &tc).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.losses, b.losses);

        let bad = LabeledSet { classes: alloc::vec![0, 1, 2], num_classes: 3, ..data };
        assert!(train(&model, &bad, &sched, &tc).is_err());
    }
}
