use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Schedule(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Discrete variance schedule indexed by `t = 1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

/// Builds a `T`-step schedule. For `Cosine` the betas follow the squared
/// cosine `alpha_bar` curve, clipped to `[beta_start, beta_end]`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => alloc::vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let c = libm::cos((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * core::f64::consts::FRAC_PI_2);
                c * c
            };
            let f0 = f(0.0);
            (1..=steps)
                .map(|t| {
                    let ab = f(t as f64) / f0;
                    let ab_prev = f((t - 1) as f64) / f0;
                    (1.0 - ab / ab_prev).clamp(beta_start, beta_end)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(&betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta list".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                libm::sqrt((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i])
            })
            .collect();
        Ok(Self { betas: betas.to_vec(), alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Range { what: "timestep", value: t, lo: 1, hi: self.steps() })
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior standard deviation; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn forward_noise(x0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_t(t)?;
    forward_noise_ab(x0, sched.alpha_bar(t), eps)
}

pub fn forward_noise_ab(x0: &Matrix, alpha_bar: f64, eps: &Matrix) -> Result<Matrix> {
    x0.ensure_same_shape("forward_noise", eps)?;
    let (a, b) = (libm::sqrt(alpha_bar), libm::sqrt(1.0 - alpha_bar));
    let mut out = x0.scale(a);
    out.axpy(b, eps)?;
    Ok(out)
}

/// Per-row timesteps (training batches).
pub fn forward_noise_rows(x0: &Matrix, ts: &[usize], eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    x0.ensure_same_shape("forward_noise_rows", eps)?;
    if ts.len() != x0.rows() {
        return Err(Error::Dimension { op: "forward_noise_rows", expected: (x0.rows(), 1), got: (ts.len(), 1) });
    }
    let mut out = Matrix::zeros(x0.rows(), x0.cols());
    for (r, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        for ((o, &x), &e) in out.row_mut(r).iter_mut().zip(x0.row(r)).zip(eps.row(r)) {
            *o = a * x + b * e;
        }
    }
    Ok(out)
}

/// Denoised estimate `(x_t - sqrt(1 - ab) eps) / sqrt(ab)`.
pub fn ddim_x0(x_t: &Matrix, eps_pred: &Matrix, t: usize, sched: &NoiseSchedule) -> Result<Matrix> {
    sched.check_t(t)?;
    ddim_x0_ab(x_t, eps_pred, sched.alpha_bar(t))
}

pub fn ddim_x0_ab(x_t: &Matrix, eps_pred: &Matrix, alpha_bar: f64) -> Result<Matrix> {
    x_t.ensure_same_shape("ddim_x0", eps_pred)?;
    let inv = 1.0 / libm::sqrt(alpha_bar);
    let b = libm::sqrt(1.0 - alpha_bar);
    let mut out = x_t.clone();
    for (o, &e) in out.as_mut_slice().iter_mut().zip(eps_pred.as_slice()) {
        *o = (*o - b * e) * inv;
    }
    Ok(out)
}

/// Reverse-step mean `(x_t - (1 - a) / sqrt(1 - ab) eps) / sqrt(a)`.
pub fn ddpm_mean(x_t: &Matrix, eps: &Matrix, alpha: f64, alpha_bar: f64) -> Result<Matrix> {
    x_t.ensure_same_shape("ddpm_mean", eps)?;
    let coef = (1.0 - alpha) / libm::sqrt(1.0 - alpha_bar);
    let inv = 1.0 / libm::sqrt(alpha);
    let mut out = x_t.clone();
    for (o, &e) in out.as_mut_slice().iter_mut().zip(eps.as_slice()) {
        *o = (*o - coef * e) * inv;
    }
    Ok(out)
}

/// One ancestral step `x_t -> x_{t-1}`. Fresh noise is drawn only when
/// `sigma_t > 0`, so the final step consumes no randomness.
pub fn ddpm_step(x_t: &Matrix, eps: &Matrix, t: usize, sched: &NoiseSchedule, rng: &mut RngStream) -> Result<Matrix> {
    sched.check_t(t)?;
    let mut out = ddpm_mean(x_t, eps, sched.alpha(t), sched.alpha_bar(t))?;
    let sigma = sched.sigma(t);
    if sigma > 0.0 {
        for o in out.as_mut_slice() {
            *o += sigma * rng.normal();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 0.7);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn hand_product() {
        let s = NoiseSchedule::from_betas(&[0.1, 0.2, 0.3]).unwrap();
        let ab = s.alpha_bars();
        assert!((ab[0] - 0.9).abs() < 1e-15);
        assert!((ab[1] - 0.72).abs() < 1e-15);
        assert!((ab[2] - 0.504).abs() < 1e-15);
    }

    #[test]
    fn linear_40_is_decreasing() {
        let s = make_schedule(40, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(40) < 0.7);
    }

    #[test]
    fn cosine_reaches_low_signal() {
        let s = make_schedule(40, 1e-4, 0.999, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(40) < 1e-3);
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Cosine).is_err());
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let x0 = Matrix::row_vector(&[2.0, 0.0]);
        let eps = Matrix::row_vector(&[0.0, 2.0]);
        assert_eq!(forward_noise_ab(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(forward_noise_ab(&x0, 0.0, &eps).unwrap(), eps);
        let xt = forward_noise_ab(&x0, 0.25, &eps).unwrap();
        assert!((xt[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((xt[(0, 1)] - libm::sqrt(3.0)).abs() < 1e-15);

        let s = make_schedule(5, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert!(matches!(forward_noise(&x0, 0, &eps, &s), Err(Error::Range { .. })));
        assert!(matches!(forward_noise(&x0, 6, &eps, &s), Err(Error::Range { .. })));
    }

    #[test]
    fn ddim_inverts_forward() {
        let xt = Matrix::row_vector(&[1.0, libm::sqrt(3.0)]);
        let eps = Matrix::row_vector(&[0.0, 2.0]);
        let x0 = ddim_x0_ab(&xt, &eps, 0.25).unwrap();
        assert!((x0[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(x0[(0, 1)].abs() < 1e-14);
        assert_eq!(ddim_x0_ab(&xt, &eps, 1.0).unwrap(), xt);
    }

    #[test]
    fn ddpm_mean_hand_value() {
        let xt = Matrix::row_vector(&[1.0, libm::sqrt(3.0)]);
        let eps = Matrix::row_vector(&[0.0, 2.0]);
        let out = ddpm_mean(&xt, &eps, 0.96, 0.25).unwrap();
        // scalar recomputation: coefficient 0.04 / sqrt(0.75), scaled by 1 / sqrt(0.96)
        let k = 1.0 / 0.96f64.sqrt();
        let second = (3.0f64.sqrt() - 0.04 * 2.0 / 0.75f64.sqrt()) * k;
        assert!((out[(0, 0)] - k).abs() < 1e-14);
        assert!((out[(0, 1)] - second).abs() < 1e-14);
    }

    #[test]
    fn no_op_step() {
        let xt = Matrix::row_vector(&[0.3, -1.0]);
        let eps = Matrix::row_vector(&[5.0, 5.0]);
        assert_eq!(ddpm_mean(&xt, &eps, 1.0, 0.5).unwrap(), xt);
    }
}
