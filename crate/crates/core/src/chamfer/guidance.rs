use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::distance::chamfer_grad_points;
use crate::diffusion::{ddim_x0_ab, DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::featspace::{FeatureSet, Projector};
use crate::numkit::{Matrix, Tape};

/// How the Chamfer gradient reaches `x_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Through the explicit `x_t` term of the denoised estimate only; the
    /// noise prediction is held constant.
    StopGrad,
    /// Also through the noise prediction, by reverse-mode differentiation of
    /// the (CFG-combined) denoiser.
    Full,
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::StopGrad => "stopgrad",
            GradMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stopgrad" => Ok(GradMode::StopGrad),
            "full" => Ok(GradMode::Full),
            other => Err(Error::config(format!("unknown grad_mode {other:?}"))),
        }
    }
}

/// Where the guidance correction is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceTarget {
    /// Score-space form: `eps += gamma sqrt(1 - ab) grad_{x_t} L`.
    Eps,
    /// Direct descent on the noisy state: `x_t -= gamma grad_{x_t} L`.
    Xt,
}

impl GuidanceTarget {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceTarget::Eps => "eps",
            GuidanceTarget::Xt => "xt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(GuidanceTarget::Eps),
            "xt" => Ok(GuidanceTarget::Xt),
            other => Err(Error::config(format!("unknown guidance target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub gamma: f64,
    /// Guidance runs at timesteps divisible by `g_freq`.
    pub g_freq: usize,
    pub omega: f64,
    pub grad_mode: GradMode,
    pub target: GuidanceTarget,
    /// Projected real exemplars.
    pub exemplars: FeatureSet,
    /// Class of every exemplar row, when known.
    pub exemplar_classes: Option<Vec<usize>>,
    pub projector: Projector,
    /// Inclusive `[t_lo, t_hi]`; `None` means every step.
    pub window: Option<(usize, usize)>,
    /// Match each class in the batch only against its own exemplars instead
    /// of the pool of all classes present.
    pub per_class: bool,
}

impl GuidanceConfig {
    pub fn new(gamma: f64, exemplars: FeatureSet, projector: Projector) -> Self {
        Self {
            gamma,
            g_freq: 5,
            omega: 1.0,
            grad_mode: GradMode::StopGrad,
            target: GuidanceTarget::Eps,
            exemplars,
            exemplar_classes: None,
            projector,
            window: None,
            per_class: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("gamma must be finite and >= 0"));
        }
        if self.g_freq == 0 {
            return Err(Error::config("g_freq must be >= 1"));
        }
        if self.exemplars.is_empty() {
            return Err(Error::config("exemplar set is empty"));
        }
        if self.projector.id() != self.exemplars.projector_id {
            return Err(Error::config(format!(
                "projector {:016x} does not match exemplar features {:016x}",
                self.projector.id(),
                self.exemplars.projector_id
            )));
        }
        if let Some(cls) = &self.exemplar_classes {
            if cls.len() != self.exemplars.len() {
                return Err(Error::config("exemplar_classes length differs from exemplar count"));
            }
        }
        if let Some((lo, hi)) = self.window {
            if lo > hi {
                return Err(Error::config("guidance window has t_lo > t_hi"));
            }
        }
        Ok(())
    }

    pub fn is_scheduled(&self, t: usize) -> bool {
        let in_window = self.window.is_none_or(|(lo, hi)| (lo..=hi).contains(&t));
        in_window && self.g_freq > 0 && t % self.g_freq == 0
    }

    /// Number of guided steps in a `steps`-long reverse process.
    pub fn scheduled_count(&self, steps: usize) -> usize {
        (1..=steps).filter(|&t| self.is_scheduled(t)).count()
    }

    fn exemplar_rows(&self, classes: &[usize]) -> Vec<usize> {
        match &self.exemplar_classes {
            Some(ec) => (0..ec.len()).filter(|&i| classes.contains(&ec[i])).collect(),
            None => (0..self.exemplars.len()).collect(),
        }
    }
}

/// Model state the guidance hook needs at one reverse step.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceContext<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a NoiseSchedule,
    /// Class label per batch row.
    pub labels: &'a [usize],
    /// Conditioning embedding actually fed to the denoiser (after any
    /// annealing), one row per batch row.
    pub cond_embedding: &'a Matrix,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adjusted {
    Eps(Matrix),
    Xt(Matrix),
}

/// `sqrt(1 - ab) / sqrt(ab)`: maps a gradient on the denoised estimate to a
/// noise-prediction correction.
pub fn eps_space_factor(alpha_bar: f64) -> f64 {
    libm::sqrt(1.0 - alpha_bar) / libm::sqrt(alpha_bar)
}

/// Chamfer loss of the projected batch `x0` against the exemplars, and its
/// gradient with respect to `x0`.
pub fn x0_gradient(x0: &Matrix, labels: Option<&[usize]>, cfg: &GuidanceConfig) -> Result<(f64, Matrix)> {
    let feats = cfg.projector.apply(x0)?;
    let mut g_feat = Matrix::zeros(feats.rows(), feats.cols());
    let mut loss = 0.0;
    match (labels, &cfg.exemplar_classes) {
        (Some(labels), Some(_)) if cfg.per_class => {
            let mut classes: Vec<usize> = labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            for c in classes {
                let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == c).collect();
                let ex_rows = cfg.exemplar_rows(&[c]);
                if ex_rows.is_empty() {
                    continue;
                }
                let ex = cfg.exemplars.features.select_rows(&ex_rows);
                let (b, g) = chamfer_grad_points(&ex, &feats.select_rows(&rows))?;
                loss += b.total;
                for (k, &r) in rows.iter().enumerate() {
                    g_feat.row_mut(r).copy_from_slice(g.row(k));
                }
            }
        }
        _ => {
            let ex_rows = match labels {
                Some(l) => cfg.exemplar_rows(l),
                None => (0..cfg.exemplars.len()).collect(),
            };
            if ex_rows.is_empty() {
                return Err(Error::config("no exemplars for the classes in this batch"));
            }
            let ex = if ex_rows.len() == cfg.exemplars.len() {
                cfg.exemplars.features.clone()
            } else {
                cfg.exemplars.features.select_rows(&ex_rows)
            };
            let (b, g) = chamfer_grad_points(&ex, &feats)?;
            loss = b.total;
            g_feat = g;
        }
    }
    let g_x0 = cfg.projector.vjp(x0, &g_feat)?;
    Ok((loss, g_x0))
}

/// `J_epsᵀ v` for the CFG-combined noise prediction at `(x_t, t)`.
pub fn eps_vjp(x_t: &Matrix, t: usize, ctx: &GuidanceContext<'_>, v: &Matrix) -> Result<Matrix> {
    let model = ctx.model;
    let mut tape = Tape::new();
    let vars = model.bind_frozen(&mut tape);
    let x = tape.leaf(x_t.clone());
    let ts = vec![t; x_t.rows()];
    let emb_c = tape.constant(ctx.cond_embedding.clone());
    let out_c = model.forward_tape_with_embedding(&mut tape, &vars, x, &ts, emb_c)?;
    let out = if ctx.omega == 1.0 {
        out_c
    } else {
        let null = vec![model.null_token(); x_t.rows()];
        let emb_u = tape.constant(model.class_embeddings(&null)?);
        let out_u = model.forward_tape_with_embedding(&mut tape, &vars, x, &ts, emb_u)?;
        let c = tape.scale(out_c, ctx.omega);
        let u = tape.scale(out_u, 1.0 - ctx.omega);
        tape.add(c, u)?
    };
    let grads = tape.backward(out, v.clone())?;
    Ok(grads.get(x))
}

/// Chamfer loss at `x_t` and its gradient with respect to `x_t`.
pub fn xt_gradient(x_t: &Matrix, t: usize, eps: &Matrix, ctx: &GuidanceContext<'_>, cfg: &GuidanceConfig) -> Result<(f64, Matrix)> {
    ctx.sched.check_t(t)?;
    let ab = ctx.sched.alpha_bar(t);
    let x0 = ddim_x0_ab(x_t, eps, ab)?;
    let (loss, g_x0) = x0_gradient(&x0, Some(ctx.labels), cfg)?;
    let inv = 1.0 / libm::sqrt(ab);
    let mut grad = g_x0.scale(inv);
    if cfg.grad_mode == GradMode::Full {
        let jt = eps_vjp(x_t, t, ctx, &g_x0)?;
        grad.axpy(-libm::sqrt(1.0 - ab) * inv, &jt)?;
    }
    Ok((loss, grad))
}

/// One Chamfer guidance correction at timestep `t`.
///
/// Descends the Chamfer distance between the exemplars and the projected
/// denoised estimate of the batch. With the `Eps` target the noise
/// prediction moves by `gamma sqrt(1 - ab) grad_{x_t} L`, which in stopgrad
/// mode equals `gamma sqrt(1 - ab) / sqrt(ab) g` for the gradient `g` on the
/// denoised estimate.
pub fn guidance_step(x_t: &Matrix, t: usize, eps: &Matrix, ctx: &GuidanceContext<'_>, cfg: &GuidanceConfig) -> Result<Adjusted> {
    cfg.validate()?;
    if cfg.gamma == 0.0 {
        return Ok(match cfg.target {
            GuidanceTarget::Eps => Adjusted::Eps(eps.clone()),
            GuidanceTarget::Xt => Adjusted::Xt(x_t.clone()),
        });
    }
    let (_, grad) = xt_gradient(x_t, t, eps, ctx, cfg)?;
    Ok(match cfg.target {
        GuidanceTarget::Eps => {
            let mut out = eps.clone();
            out.axpy(cfg.gamma * libm::sqrt(1.0 - ctx.sched.alpha_bar(t)), &grad)?;
            Adjusted::Eps(out)
        }
        GuidanceTarget::Xt => {
            let mut out = x_t.clone();
            out.axpy(-cfg.gamma, &grad)?;
            Adjusted::Xt(out)
        }
    })
}

/// Generic reward guidance on the noise prediction: ascends a reward whose
/// gradient with respect to the denoised estimate is `grad_reward`, using the
/// same mapping as [`guidance_step`] in stopgrad mode.
pub fn reward_guidance(eps: &Matrix, grad_reward: &Matrix, gamma: f64, alpha_bar: f64) -> Result<Matrix> {
    let mut out = eps.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    out.axpy(-gamma * eps_space_factor(alpha_bar), grad_reward)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, NoiseSchedule};
    use crate::featspace::Source;
    use crate::numkit::RngStream;

    fn one_d_setup(gamma: f64, target: GuidanceTarget) -> (DenoiserModel, GuidanceConfig) {
        let mut dc = DenoiserConfig::new(1, 1, 4);
        dc.hidden = vec![4];
        let model = DenoiserModel::new(dc, &mut RngStream::new(0)).unwrap();
        let proj = Projector::identity(1);
        let ex = proj.project(&Matrix::column(&[0.0]), Source::Real).unwrap();
        let mut cfg = GuidanceConfig::new(gamma, ex, proj);
        cfg.target = target;
        (model, cfg)
    }

    #[test]
    fn point_at_five_moves_toward_zero() {
        // ab close to 1: a single tiny beta
        let sched = NoiseSchedule::from_betas(&[1e-300_f64.max(f64::MIN_POSITIVE)]).unwrap();
        let (model, cfg) = one_d_setup(0.1, GuidanceTarget::Xt);
        let x = Matrix::column(&[5.0]);
        let eps = Matrix::column(&[0.0]);
        let emb = model.class_embeddings(&[0]).unwrap();
        let ctx = GuidanceContext { model: &model, sched: &sched, labels: &[0], cond_embedding: &emb, omega: 1.0 };
        match guidance_step(&x, 1, &eps, &ctx, &cfg).unwrap() {
            Adjusted::Xt(x_new) => assert!((x_new[(0, 0)] - (5.0 - 0.1 * 20.0)).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eps_target_uses_score_factor() {
        let sched = NoiseSchedule::from_betas(&[0.75]).unwrap();
        let (model, cfg) = one_d_setup(0.1, GuidanceTarget::Eps);
        let x = Matrix::column(&[2.5]);
        let eps = Matrix::column(&[0.0]);
        let emb = model.class_embeddings(&[0]).unwrap();
        let ctx = GuidanceContext { model: &model, sched: &sched, labels: &[0], cond_embedding: &emb, omega: 1.0 };
        // x0 = 2.5 / 0.5 = 5, g = 4 * 5 = 20, factor sqrt(.75)/.5
        let expect = 0.1 * eps_space_factor(0.25) * 20.0;
        match guidance_step(&x, 1, &eps, &ctx, &cfg).unwrap() {
            Adjusted::Eps(e) => {
                assert!((e[(0, 0)] - expect).abs() < 1e-12);
                let x0_new = ddim_x0_ab(&x, &e, 0.25).unwrap();
                assert!(x0_new[(0, 0)] < 5.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_gamma_is_bitwise_neutral() {
        let sched = NoiseSchedule::from_betas(&[0.3, 0.4]).unwrap();
        let (model, cfg) = one_d_setup(0.0, GuidanceTarget::Eps);
        let x = Matrix::column(&[1.3, -0.2]);
        let eps = Matrix::column(&[0.7, 0.1]);
        let emb = model.class_embeddings(&[0, 0]).unwrap();
        let ctx = GuidanceContext { model: &model, sched: &sched, labels: &[0, 0], cond_embedding: &emb, omega: 1.0 };
        assert_eq!(guidance_step(&x, 2, &eps, &ctx, &cfg).unwrap(), Adjusted::Eps(eps));
    }

    #[test]
    fn projector_mismatch_is_config_error() {
        let (_, mut cfg) = one_d_setup(0.1, GuidanceTarget::Eps);
        cfg.projector = Projector::linear(Matrix::scalar(2.0));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_grid() {
        let (_, mut cfg) = one_d_setup(0.1, GuidanceTarget::Eps);
        assert_eq!(cfg.scheduled_count(40), 8);
        assert!(cfg.is_scheduled(40) && !cfg.is_scheduled(39));
        cfg.window = Some((10, 20));
        assert_eq!(cfg.scheduled_count(40), 3);
    }

    #[test]
    fn reward_guidance_identities() {
        let eps = Matrix::row_vector(&[0.2, -0.4]);
        let g = Matrix::row_vector(&[1.0, 3.0]);
        assert_eq!(reward_guidance(&eps, &g, 0.0, 0.5).unwrap(), eps);
        assert_eq!(reward_guidance(&eps, &Matrix::zeros(1, 2), 0.3, 0.5).unwrap(), eps);
    }
}
