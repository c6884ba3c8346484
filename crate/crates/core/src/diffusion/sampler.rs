use alloc::boxed::Box;
use alloc::vec;

use super::model::DenoiserModel;
use super::schedule::{ddpm_step, NoiseSchedule};
use crate::chamfer::{cads_anneal, guidance_step, Adjusted, CadsParams, GuidanceConfig, GuidanceContext};
use crate::error::{Error, Result};
use crate::numkit::{gauss, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    /// Classifier-free guidance scale; 1 evaluates the conditional branch only.
    pub omega: f64,
    pub guidance: Option<GuidanceConfig>,
    pub cads: Option<CadsParams>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { omega: 1.0, guidance: None, cads: None }
    }
}

impl SampleConfig {
    pub fn with_omega(omega: f64) -> Self {
        Self { omega, ..Self::default() }
    }

    /// Sampling driven by a guidance config, taking its `omega`.
    pub fn guided(guidance: GuidanceConfig) -> Self {
        Self { omega: guidance.omega, guidance: Some(guidance), cads: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() {
            return Err(Error::config("omega must be finite"));
        }
        if let Some(g) = &self.guidance {
            g.validate()?;
        }
        if let Some(c) = &self.cads {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub points: Matrix,
    /// Batched denoiser evaluations of each branch.
    pub cond_calls: usize,
    pub uncond_calls: usize,
    pub guidance_calls: usize,
}

/// `eps_u + omega (eps_c - eps_u)`.
pub fn cfg_combine(eps_c: &Matrix, eps_u: &Matrix, omega: f64) -> Result<Matrix> {
    let mut out = eps_u.scale(1.0 - omega);
    out.axpy(omega, eps_c)?;
    Ok(out)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, one row per label.
pub fn sample(model: &DenoiserModel, sched: &NoiseSchedule, labels: &[usize], cfg: &SampleConfig, rng: &mut RngStream) -> Result<SampleOutput> {
    sample_until(model, sched, labels, cfg, 0, rng)
}

/// Runs the reverse process from `T` down to timestep `stop_at` and returns
/// `x_{stop_at}`.
///
/// `rng` supplies the initial state and the per-step noise; CADS noise comes
/// from a derived stream so that turning annealing on does not shift the
/// sampling noise.
pub fn sample_until(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    labels: &[usize],
    cfg: &SampleConfig,
    stop_at: usize,
    rng: &mut RngStream,
) -> Result<SampleOutput> {
    cfg.validate()?;
    model.check_labels(labels)?;
    let steps = sched.steps();
    if steps != model.config.steps {
        return Err(Error::Schedule(alloc::format!(
            "schedule has {steps} steps, model was built for {}",
            model.config.steps
        )));
    }
    if stop_at >= steps {
        return Err(Error::Range { what: "stop step", value: stop_at, lo: 0, hi: steps - 1 });
    }
    let n = labels.len();
    let mut cads_rng = rng.derive(0xCAD5);
    let mut x = gauss(rng, n, model.data_dim());
    let cond = model.class_embeddings(labels)?;
    let uncond = if cfg.omega != 1.0 { Some(model.class_embeddings(&vec![model.null_token(); n])?) } else { None };
    let mut out = SampleOutput { points: Matrix::zeros(0, 0), cond_calls: 0, uncond_calls: 0, guidance_calls: 0 };
    for t in (stop_at + 1..=steps).rev() {
        let ts = vec![t; n];
        let emb = match &cfg.cads {
            Some(p) => cads_anneal(&cond, t, steps, p, &mut cads_rng)?,
            None => cond.clone(),
        };
        let eps_c = model.predict_with_embedding(&x, &ts, &emb)?;
        out.cond_calls += 1;
        let mut eps = match &uncond {
            Some(u) => {
                let eps_u = model.predict_with_embedding(&x, &ts, u)?;
                out.uncond_calls += 1;
                cfg_combine(&eps_c, &eps_u, cfg.omega)?
            }
            None => eps_c,
        };
        if let Some(g) = &cfg.guidance {
            if g.gamma != 0.0 && g.is_scheduled(t) {
                let ctx = GuidanceContext { model, sched, labels, cond_embedding: &emb, omega: cfg.omega };
                let adjusted = guidance_step(&x, t, &eps, &ctx, g).map_err(|e| Error::Guidance { step: t, source: Box::new(e) })?;
                out.guidance_calls += 1;
                match adjusted {
                    Adjusted::Eps(e) => eps = e,
                    Adjusted::Xt(xt) => {
                        // re-predict at the moved state so the step stays consistent
                        x = xt;
                        let eps_c = model.predict_with_embedding(&x, &ts, &emb)?;
                        out.cond_calls += 1;
                        eps = match &uncond {
                            Some(u) => {
                                let eps_u = model.predict_with_embedding(&x, &ts, u)?;
                                out.uncond_calls += 1;
                                cfg_combine(&eps_c, &eps_u, cfg.omega)?
                            }
                            None => eps_c,
                        };
                    }
                }
            }
        }
        x = ddpm_step(&x, &eps, t, sched, rng)?;
        if !x.all_finite() {
            return Err(Error::Numerical("sampler produced a non-finite state"));
        }
    }
    out.points = x;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chamfer::GuidanceTarget;
    use crate::diffusion::{make_schedule, DenoiserConfig, ScheduleKind};
    use crate::featspace::{Projector, Source};

    fn setup() -> (DenoiserModel, NoiseSchedule) {
        let mut dc = DenoiserConfig::new(2, 3, 10);
        dc.hidden = vec![8, 8];
        let mut model = DenoiserModel::new(dc, &mut RngStream::new(4)).unwrap();
        // perturb the zero head so the network output depends on its input
        let mut r = RngStream::new(5);
        for p in model.params_mut() {
            for v in p.as_mut_slice() {
                *v += 0.05 * r.normal();
            }
        }
        (model, make_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap())
    }

    #[test]
    fn omega_one_skips_unconditional_branch() {
        let (m, s) = setup();
        let out = sample(&m, &s, &[0, 1, 2], &SampleConfig::with_omega(1.0), &mut RngStream::new(1)).unwrap();
        assert_eq!((out.cond_calls, out.uncond_calls), (10, 0));
        let out = sample(&m, &s, &[0, 1, 2], &SampleConfig::with_omega(2.0), &mut RngStream::new(1)).unwrap();
        assert_eq!((out.cond_calls, out.uncond_calls), (10, 10));
    }

    #[test]
    fn cfg_combine_endpoints() {
        let c = Matrix::row_vector(&[1.0, 2.0]);
        let u = Matrix::row_vector(&[-1.0, 0.5]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn zero_gamma_guidance_is_bitwise_neutral() {
        let (m, s) = setup();
        let proj = Projector::identity(2);
        let ex = proj.project(&Matrix::from_rows(&[[1.0, 1.0], [-1.0, 0.0]]).unwrap(), Source::Real).unwrap();
        let mut g = GuidanceConfig::new(0.0, ex, proj);
        g.omega = 1.5;
        let labels = [0, 2, 1, 1];
        let plain = sample(&m, &s, &labels, &SampleConfig::with_omega(1.5), &mut RngStream::new(8)).unwrap();
        let guided = sample(&m, &s, &labels, &SampleConfig::guided(g), &mut RngStream::new(8)).unwrap();
        assert_eq!(plain.points, guided.points);
        assert_eq!(guided.guidance_calls, 0);
    }

    #[test]
    fn guidance_runs_on_schedule_and_changes_output() {
        let (m, s) = setup();
        let proj = Projector::identity(2);
        let ex = proj.project(&Matrix::from_rows(&[[3.0, 3.0]]).unwrap(), Source::Real).unwrap();
        for target in [GuidanceTarget::Eps, GuidanceTarget::Xt] {
            let mut g = GuidanceConfig::new(0.05, ex.clone(), proj.clone());
            g.target = target;
            let plain = sample(&m, &s, &[0; 6], &SampleConfig::default(), &mut RngStream::new(8)).unwrap();
            let guided = sample(&m, &s, &[0; 6], &SampleConfig::guided(g), &mut RngStream::new(8)).unwrap();
            assert_eq!(guided.guidance_calls, 2);
            let d0 = plain.points.iter_rows().map(|r| (r[0] - 3.0).powi(2) + (r[1] - 3.0).powi(2)).sum::<f64>();
            let d1 = guided.points.iter_rows().map(|r| (r[0] - 3.0).powi(2) + (r[1] - 3.0).powi(2)).sum::<f64>();
            assert!(d1 < d0, "{target:?}: {d1} !< {d0}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, s) = setup();
        let a = sample(&m, &s, &[0, 1], &SampleConfig::default(), &mut RngStream::new(3)).unwrap();
        let b = sample(&m, &s, &[0, 1], &SampleConfig::default(), &mut RngStream::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stop_step_bounds() {
        let (m, s) = setup();
        let r = sample_until(&m, &s, &[0], &SampleConfig::default(), 10, &mut RngStream::new(3));
        assert!(matches!(r, Err(Error::Range { .. })));
    }
}
