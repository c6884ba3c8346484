//! Training-based baselines: plain fine-tuning on the exemplars and
//! reward-feedback fine-tuning with the negative Chamfer distance as reward.

use alloc::vec;
use alloc::vec::Vec;

use crate::chamfer::chamfer_grad_points;
use crate::datagen::ExemplarSet;
use crate::diffusion::{sample_until, train, DenoiserModel, NoiseSchedule, SampleConfig, TrainConfig, Trained};
use crate::error::{Error, Result};
use crate::featspace::Projector;
use crate::numkit::{Matrix, Optimizer, OptimizerKind, RngStream, Tape};

/// Continues denoising training on the exemplars only.
pub fn vanilla_finetune(model: &DenoiserModel, exemplars: &ExemplarSet, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<Trained> {
    if exemplars.k == 0 || exemplars.num_classes() == 0 {
        return Err(Error::contract("exemplar set is empty"));
    }
    train(model, &exemplars.to_labeled(), sched, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflConfig {
    /// Weight of the Chamfer loss.
    pub lambda: f64,
    /// The stop point is drawn uniformly from `t1..=t2` completed denoising
    /// steps; the reward is taken at timestep `T - stop`.
    pub t1: usize,
    pub t2: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Generated samples per class in each iteration.
    pub batch_per_class: usize,
    /// CFG scale used while sampling and in the differentiated call.
    pub omega: f64,
    pub optimizer: OptimizerKind,
}

impl Default for ReflConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            t1: 30,
            t2: 39,
            steps: 200,
            learning_rate: 1e-2,
            seed: 0,
            batch_per_class: 32,
            omega: 1.0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl ReflConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(1 <= self.t1 && self.t1 <= self.t2 && self.t2 <= steps) {
            return Err(Error::config(alloc::format!(
                "ReFL window needs 1 <= t1 <= t2 <= T, got t1 = {}, t2 = {}, T = {steps}",
                self.t1,
                self.t2
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("ReFL lambda must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0) || self.batch_per_class == 0 {
            return Err(Error::config("ReFL needs a positive learning rate and batch size"));
        }
        Ok(())
    }

    /// Timestep at which the reward is evaluated after `stop` denoising steps.
    pub fn reward_timestep(stop: usize, steps: usize) -> usize {
        steps.saturating_sub(stop).max(1)
    }
}

/// Exemplars already projected, one matrix per class.
#[derive(Clone, Debug)]
pub struct ReflTarget<'a> {
    pub features: Vec<Matrix>,
    pub projector: &'a Projector,
}

impl<'a> ReflTarget<'a> {
    pub fn new(exemplars: &ExemplarSet, projector: &'a Projector) -> Result<Self> {
        let features = exemplars.per_class.iter().map(|m| projector.apply(m)).collect::<Result<Vec<_>>>()?;
        Ok(Self { features, projector })
    }
}

/// Reward loss `lambda · mean_c chamfer(exemplars_c, P(x0_c))` at state
/// `x_t`, and its gradient for every model parameter, differentiating only
/// the single denoiser call at `t`.
#[allow(clippy::too_many_arguments)]
pub fn refl_loss_and_grads(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x_t: &Matrix,
    t: usize,
    labels: &[usize],
    target: &ReflTarget<'_>,
    lambda: f64,
    omega: f64,
) -> Result<(f64, Vec<Matrix>)> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let x = tape.constant(x_t.clone());
    let ts = vec![t; x_t.rows()];
    let eps_c = model.forward_tape(&mut tape, &vars, x, &ts, labels)?;
    let eps = if omega == 1.0 {
        eps_c
    } else {
        let null = vec![model.null_token(); x_t.rows()];
        let eps_u = model.forward_tape(&mut tape, &vars, x, &ts, &null)?;
        let c = tape.scale(eps_c, omega);
        let u = tape.scale(eps_u, 1.0 - omega);
        tape.add(c, u)?
    };
    let noise = tape.scale(eps, libm::sqrt(1.0 - ab));
    let diff = tape.sub(x, noise)?;
    let x0 = tape.scale(diff, 1.0 / libm::sqrt(ab));

    let x0_val = tape.value(x0).clone();
    let feats = target.projector.apply(&x0_val)?;
    let mut g_feat = Matrix::zeros(feats.rows(), feats.cols());
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let w = lambda / classes.len() as f64;
    let mut loss = 0.0;
    for &c in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let ex = target.features.get(c).ok_or_else(|| Error::contract(alloc::format!("no exemplars for class {c}")))?;
        let (b, g) = chamfer_grad_points(ex, &feats.select_rows(&rows))?;
        loss += w * b.total;
        for (k, &r) in rows.iter().enumerate() {
            for (o, &v) in g_feat.row_mut(r).iter_mut().zip(g.row(k)) {
                *o = w * v;
            }
        }
    }
    let g_x0 = target.projector.vjp(&x0_val, &g_feat)?;
    let grads = tape.backward(x0, g_x0)?;
    Ok((loss, vars.all().into_iter().map(|v| grads.get(v)).collect()))
}

/// Reward-feedback fine-tuning with the Chamfer reward.
///
/// Each iteration samples a batch (all classes, `batch_per_class` each) with
/// no gradient down to a random late timestep, then takes one optimizer step
/// on the reward loss through the last denoiser call. `losses` holds the
/// reward loss per iteration.
pub fn refl_chamfer_finetune(
    model: &DenoiserModel,
    exemplars: &ExemplarSet,
    projector: &Projector,
    sched: &NoiseSchedule,
    cfg: &ReflConfig,
) -> Result<Trained> {
    let steps = sched.steps();
    cfg.validate(steps)?;
    let target = ReflTarget::new(exemplars, projector)?;
    let classes = exemplars.num_classes();
    let labels: Vec<usize> = (0..classes).flat_map(|c| vec![c; cfg.batch_per_class]).collect();
    let sample_cfg = SampleConfig::with_omega(cfg.omega);
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = RngStream::with_stream(cfg.seed, 0x4ef1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let stop = cfg.t1 + rng.below(cfg.t2 - cfg.t1 + 1);
        let t = ReflConfig::reward_timestep(stop, steps);
        let mut srng = rng.derive(step as u64);
        let x_t = sample_until(&model, sched, &labels, &sample_cfg, t, &mut srng)?.points;
        let (loss, grads) = refl_loss_and_grads(&model, sched, &x_t, t, &labels, &target, cfg.lambda, cfg.omega)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
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

    fn tiny() -> (DenoiserModel, NoiseSchedule, ExemplarSet) {
        let mut dc = DenoiserConfig::new(2, 2, 10);
        dc.hidden = vec![2];
        let mut m = DenoiserModel::new(dc, &mut RngStream::new(1)).unwrap();
        let mut r = RngStream::new(2);
        for p in m.params_mut() {
            for v in p.as_mut_slice() {
                *v += 0.3 * r.normal();
            }
        }
        let ex = ExemplarSet {
            per_class: vec![Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap(), Matrix::from_rows(&[[-1.0, 0.0], [0.0, -1.0]]).unwrap()],
            k: 2,
        };
        (m, make_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap(), ex)
    }

    #[test]
    fn window_validation() {
        let (m, s, ex) = tiny();
        let p = Projector::identity(2);
        for (t1, t2) in [(0, 5), (6, 5), (3, 11)] {
            let cfg = ReflConfig { t1, t2, steps: 1, ..ReflConfig::default() };
            assert!(matches!(refl_chamfer_finetune(&m, &ex, &p, &s, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_lambda_leaves_weights() {
        let (m, s, ex) = tiny();
        let p = Projector::identity(2);
        let cfg = ReflConfig { lambda: 0.0, t1: 5, t2: 9, steps: 3, batch_per_class: 4, ..ReflConfig::default() };
        let out = refl_chamfer_finetune(&m, &ex, &p, &s, &cfg).unwrap();
        assert_eq!(out.model.checksum(), m.checksum());
    }

    #[test]
    fn zero_vanilla_steps_leave_weights() {
        let (m, s, ex) = tiny();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert_eq!(vanilla_finetune(&m, &ex, &s, &cfg).unwrap().model.checksum(), m.checksum());
    }

    #[test]
    fn shapes_and_determinism() {
        let (m, s, ex) = tiny();
        let p = Projector::identity(2);
        let cfg = ReflConfig { t1: 5, t2: 9, steps: 3, batch_per_class: 4, omega: 1.5, ..ReflConfig::default() };
        let a = refl_chamfer_finetune(&m, &ex, &p, &s, &cfg).unwrap();
        let b = refl_chamfer_finetune(&m, &ex, &p, &s, &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_ne!(a.model.checksum(), m.checksum());
        assert_eq!(a.model.param_shapes(), m.param_shapes());
    }
}
