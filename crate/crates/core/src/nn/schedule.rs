use serde::{Deserialize, Serialize};

/// Learning-rate schedule evaluated on the optimizer step counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr = peak · min(step/warmup, sqrt(warmup/step))`; zero at step 0,
    /// peak exactly at the warmup horizon.
    WarmupInvSqrt { peak: f64, warmup: u64 },
    /// `lr = initial · max(0, 1 − step/total)`.
    LinearDecay { initial: f64, total_steps: u64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupInvSqrt { peak, warmup } => {
                if step == 0 {
                    return 0.0;
                }
                let s = step as f64;
                let w = warmup.max(1) as f64;
                peak * (s / w).min((w / s).sqrt())
            }
            LrSchedule::LinearDecay { initial, total_steps } => {
                let frac = step as f64 / total_steps.max(1) as f64;
                initial * (1.0 - frac).max(0.0)
            }
        }
    }
}
