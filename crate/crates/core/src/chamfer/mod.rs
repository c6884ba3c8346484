//! Chamfer set distance, its gradient, the inference-time guidance step
//! built on it, and the condition-annealing and generic reward-guidance
//! baselines.

mod cads;
mod distance;
mod guidance;

pub use cads::{cads_anneal, CadsParams};
pub use distance::{chamfer, chamfer_grad, chamfer_grad_points, chamfer_points, ChamferBreakdown};
pub use guidance::{
    eps_space_factor, eps_vjp, guidance_step, reward_guidance, x0_gradient, xt_gradient, Adjusted, GradMode,
    GuidanceConfig, GuidanceContext, GuidanceTarget,
};
