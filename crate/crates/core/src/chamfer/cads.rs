use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Condition-annealing parameters.
///
/// With `u = t / T` (1 at the first denoising step), the signal weight is
/// `w(u) = 1` for `u <= tau1`, `0` for `u >= tau2` and linear in between. The
/// embedding becomes `sqrt(w) y + noise_scale sqrt(1 - w) n`, then each row
/// is rescaled to its original mean and standard deviation and blended with
/// the unrescaled mix by `psi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CadsParams {
    pub tau1: f64,
    pub tau2: f64,
    pub noise_scale: f64,
    pub psi: f64,
}

impl Default for CadsParams {
    fn default() -> Self {
        Self { tau1: 0.6, tau2: 0.9, noise_scale: 0.25, psi: 1.0 }
    }
}

impl CadsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 < self.tau2) {
            return Err(Error::config("CADS needs tau1 < tau2"));
        }
        if !(0.0..=1.0).contains(&self.psi) || self.noise_scale < 0.0 {
            return Err(Error::config("CADS needs psi in [0, 1] and noise_scale >= 0"));
        }
        Ok(())
    }

    /// Signal weight `w(t / T)`.
    pub fn signal_weight(&self, t: usize, steps: usize) -> f64 {
        let u = t as f64 / steps as f64;
        if u <= self.tau1 {
            1.0
        } else if u >= self.tau2 {
            0.0
        } else {
            (self.tau2 - u) / (self.tau2 - self.tau1)
        }
    }
}

/// Noised copy of the conditioning embeddings for timestep `t`.
pub fn cads_anneal(embedding: &Matrix, t: usize, steps: usize, params: &CadsParams, rng: &mut RngStream) -> Result<Matrix> {
    params.validate()?;
    if !(1..=steps).contains(&t) {
        return Err(Error::Range { what: "timestep", value: t, lo: 1, hi: steps });
    }
    let w = params.signal_weight(t, steps);
    if w == 1.0 || params.noise_scale == 0.0 {
        return Ok(embedding.clone());
    }
    let (a, b) = (libm::sqrt(w), params.noise_scale * libm::sqrt(1.0 - w));
    let mut out = embedding.clone();
    for r in 0..out.rows() {
        let src = embedding.row(r);
        let (mean_in, std_in) = row_stats(src);
        let row = out.row_mut(r);
        for (o, &y) in row.iter_mut().zip(src) {
            *o = a * y + b * rng.normal();
        }
        if params.psi > 0.0 {
            let (mean_mix, std_mix) = row_stats(row);
            let ratio = if std_mix > 0.0 { std_in / std_mix } else { 0.0 };
            for o in row.iter_mut() {
                let rescaled = (*o - mean_mix) * ratio + mean_in;
                *o = params.psi * rescaled + (1.0 - params.psi) * *o;
            }
        }
    }
    Ok(out)
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len().max(1) as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}
