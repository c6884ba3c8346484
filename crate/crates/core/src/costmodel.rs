//! FLOP accounting for plain, classifier-free guided and Chamfer guided
//! sampling. Costs are inputs in a common unit (TFLOPs in the shipped
//! presets), never measurements.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    /// One denoiser forward pass for one sample.
    pub denoiser: f64,
    /// Decoding one sample from latent to data space.
    pub decode: f64,
    /// Projecting one decoded sample into feature space.
    pub projector: f64,
    /// Encoding one real exemplar, paid once per generation.
    pub exemplar_encode: f64,
    pub steps: usize,
    /// The guided run also uses classifier-free guidance.
    pub cfg_enabled: bool,
    pub g_freq: usize,
    pub k: usize,
    /// Rounded overhead figure (exemplar encoding plus guidance) to use in
    /// place of the exact product when reproducing printed totals.
    pub printed_overhead: Option<f64>,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("cost spec needs steps >= 1"));
        }
        if self.g_freq == 0 {
            return Err(Error::config("cost spec needs g_freq >= 1"));
        }
        let costs = [self.denoiser, self.decode, self.projector, self.exemplar_encode, self.printed_overhead.unwrap_or(0.0)];
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::config("costs must be finite and >= 0"));
        }
        Ok(())
    }

    /// Guidance runs every `g_freq` steps: `floor(T / g_freq)` times.
    pub fn guidance_steps(&self) -> usize {
        self.steps / self.g_freq
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    /// `T · denoiser + decode`.
    pub baseline_total: f64,
    /// `T · 2 · denoiser + decode`.
    pub cfg_total: f64,
    /// Guided total, using the printed overhead when the spec carries one.
    pub guided_total: f64,
    /// Guided total from the exact products.
    pub guided_total_exact: f64,
    /// `k · exemplar_encode + guidance_steps · (decode + projector)`.
    pub overhead_exact: f64,
    pub guidance_steps: usize,
    /// `1 - guided_total / cfg_total`.
    pub efficiency_gain: f64,
}

pub fn total_flops(spec: &CostSpec) -> Result<CostReport> {
    spec.validate()?;
    let t = spec.steps as f64;
    let baseline_total = t * spec.denoiser + spec.decode;
    let cfg_total = t * 2.0 * spec.denoiser + spec.decode;
    let sampling = if spec.cfg_enabled { cfg_total } else { baseline_total };
    let g = spec.guidance_steps();
    let overhead_exact = spec.k as f64 * spec.exemplar_encode + g as f64 * (spec.decode + spec.projector);
    let guided_total_exact = sampling + overhead_exact;
    let guided_total = sampling + spec.printed_overhead.unwrap_or(overhead_exact);
    let efficiency_gain = if cfg_total > 0.0 { 1.0 - guided_total / cfg_total } else { 0.0 };
    Ok(CostReport { baseline_total, cfg_total, guided_total, guided_total_exact, overhead_exact, guidance_steps: g, efficiency_gain })
}
