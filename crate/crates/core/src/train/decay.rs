use crate::config::{DecayConfig, DecayKind};

/// Oracle-guidance coefficient α at a global environment-step count.
///
/// linear: `α₀ · max(0, 1 − step/horizon)` (exactly zero at the horizon);
/// fixed: `α₀`; exponential: `α₀ · factor^⌊step/every⌋`.
pub fn alpha(step: u64, schedule: &DecayConfig) -> f64 {
    match schedule.kind {
        DecayKind::Linear => {
            let frac = step as f64 / schedule.horizon as f64;
            schedule.alpha0 * (1.0 - frac).max(0.0)
        }
        DecayKind::Fixed => schedule.alpha0,
        DecayKind::Exponential => {
            schedule.alpha0 * schedule.exp_factor.powi((step / schedule.exp_every) as i32)
        }
    }
}
