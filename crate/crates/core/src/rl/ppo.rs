use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Assembled PPO loss with the scalar parts broken out for logging.
#[derive(Debug)]
pub struct PpoLoss {
    pub total: Var,
    pub surrogate: f64,
    pub value: f64,
}

/// Clipped-surrogate PPO loss plus unclipped squared value error:
/// `L = −E[min(r·Â, clip(r, 1−ε, 1+ε)·Â)] + c_v·E[(V − V̂)²]`
/// with `r = exp(logπ_new − logπ_old)`. No entropy bonus.
pub fn ppo_loss(
    new_logp: &Var,
    old_logp: &Tensor,
    advantages: &Tensor,
    values: &Var,
    returns: &Tensor,
    clip: f64,
    value_coef: f64,
) -> Result<PpoLoss> {
    let n = new_logp.numel();
    if old_logp.numel() != n || advantages.numel() != n || returns.numel() != n {
        return Err(Error::shape(format!(
            "ppo_loss: {n} log-probs vs {} old / {} adv / {} returns",
            old_logp.numel(),
            advantages.numel(),
            returns.numel()
        )));
    }
    let tape = new_logp.tape();
    let ratio = new_logp.sub(&tape.leaf(old_logp))?.exp();
    if let Some(bad) = ratio.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite probability ratio at step {bad}")));
    }
    let adv = tape.leaf(advantages);
    let unclipped = ratio.mul(&adv)?;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip).mul(&adv)?;
    let surrogate = unclipped.min_elem(&clipped)?.mean().neg();
    let value_err = values.sub(&tape.leaf(returns))?.square().mean();
    let surrogate_v = surrogate.scalar_value();
    let value_v = value_err.scalar_value();
    let total = surrogate.add(&value_err.mul_scalar(value_coef))?;
    Ok(PpoLoss { total, surrogate: surrogate_v, value: value_v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn randv(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, Stream::Init, 3);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn identical_policies_give_negative_mean_advantage() {
        let n = 16;
        let logp = randv(n, -3.0, 0.0, 1);
        let adv = randv(n, -1.0, 1.0, 2);
        let tape = Tape::new();
        let new_lp = tape.leaf(&Tensor::from_vec(logp.clone()));
        let values = tape.leaf(&Tensor::from_vec(vec![0.0; n]));
        let out = ppo_loss(
            &new_lp,
            &Tensor::from_vec(logp),
            &Tensor::from_vec(adv.clone()),
            &values,
            &Tensor::from_vec(vec![0.0; n]),
            0.2,
            1.0,
        )
        .unwrap();
        let expect = -adv.iter().sum::<f64>() / n as f64;
        assert!((out.surrogate - expect).abs() < 1e-12);
    }

    #[test]
    fn ratio_clipped_at_1_2_for_positive_advantage() {
        // ratio 1.5 with Â > 0 and ε = 0.2 → the clipped term 1.2·Â wins.
        let tape = Tape::new();
        let old = 0.0;
        let new_lp = tape.leaf(&Tensor::from_vec(vec![1.5f64.ln()]));
        let values = tape.leaf(&Tensor::from_vec(vec![0.0]));
        let out = ppo_loss(
            &new_lp,
            &Tensor::from_vec(vec![old]),
            &Tensor::from_vec(vec![2.0]),
            &values,
            &Tensor::from_vec(vec![0.0]),
            0.2,
            1.0,
        )
        .unwrap();
        assert!((out.surrogate - (-1.2 * 2.0)).abs() < 1e-12, "{}", out.surrogate);
    }

    #[test]
    fn perfect_value_fit_zeroes_value_term() {
        let n = 8;
        let v = randv(n, -2.0, 2.0, 3);
        let tape = Tape::new();
        let new_lp = tape.leaf(&Tensor::from_vec(vec![0.0; n]));
        let values = tape.leaf(&Tensor::from_vec(v.clone()));
        let out = ppo_loss(
            &new_lp,
            &Tensor::from_vec(vec![0.0; n]),
            &Tensor::from_vec(vec![0.0; n]),
            &values,
            &Tensor::from_vec(v),
            0.2,
            1.0,
        )
        .unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn clipped_surrogate_is_lower_bound() {
        for seed in 0..10 {
            let n = 64;
            let new = randv(n, -3.0, 0.0, seed);
            let old = randv(n, -3.0, 0.0, seed + 50);
            let adv = randv(n, -2.0, 2.0, seed + 100);
            let tape = Tape::new();
            let new_lp = tape.leaf(&Tensor::from_vec(new.clone()));
            let values = tape.leaf(&Tensor::from_vec(vec![0.0; n]));
            let out = ppo_loss(
                &new_lp,
                &Tensor::from_vec(old.clone()),
                &Tensor::from_vec(adv.clone()),
                &values,
                &Tensor::from_vec(vec![0.0; n]),
                0.2,
                0.0,
            )
            .unwrap();
            // −surrogate = mean(min(...)) ≤ mean(r·Â) for every sample
            let unclipped: f64 = new
                .iter()
                .zip(&old)
                .zip(&adv)
                .map(|((n, o), a)| (n - o).exp() * a)
                .sum::<f64>()
                / n as f64;
            assert!(-out.surrogate <= unclipped + 1e-12);
        }
    }

    #[test]
    fn huge_epsilon_recovers_unclipped_surrogate() {
        let n = 32;
        let new = randv(n, -2.0, 0.0, 7);
        let old = randv(n, -2.0, 0.0, 8);
        let adv = randv(n, -1.5, 1.5, 9);
        let tape = Tape::new();
        let new_lp = tape.leaf(&Tensor::from_vec(new.clone()));
        let values = tape.leaf(&Tensor::from_vec(vec![0.0; n]));
        let out = ppo_loss(
            &new_lp,
            &Tensor::from_vec(old.clone()),
            &Tensor::from_vec(adv.clone()),
            &values,
            &Tensor::from_vec(vec![0.0; n]),
            1e9,
            0.0,
        )
        .unwrap();
        let unclipped: f64 = new
            .iter()
            .zip(&old)
            .zip(&adv)
            .map(|((n, o), a)| (n - o).exp() * a)
            .sum::<f64>()
            / n as f64;
        assert!((out.surrogate + unclipped).abs() < 1e-10);
    }

    #[test]
    fn non_finite_ratio_reports_step_index() {
        let tape = Tape::new();
        let new_lp = tape.leaf(&Tensor::from_vec(vec![0.0, 2000.0]));
        let values = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0]));
        let err = ppo_loss(
            &new_lp,
            &Tensor::from_vec(vec![0.0, -2000.0]),
            &Tensor::from_vec(vec![1.0, 1.0]),
            &values,
            &Tensor::from_vec(vec![0.0, 0.0]),
            0.2,
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn gradient_check_through_loss() {
        use crate::gradcheck;
        let n = 6;
        let new = Tensor::from_vec(randv(n, -2.0, 0.0, 11));
        let vals = Tensor::from_vec(randv(n, -1.0, 1.0, 12));
        let old = Tensor::from_vec(randv(n, -2.0, 0.0, 13));
        let adv = Tensor::from_vec(randv(n, -1.0, 1.0, 14));
        let ret = Tensor::from_vec(randv(n, -1.0, 1.0, 15));
        let r = gradcheck::check(&[new, vals], |tape, ins| {
            let lp = tape.param("lp", &ins[0]);
            let v = tape.param("v", &ins[1]);
            let out = ppo_loss(&lp, &old, &adv, &v, &ret, 0.2, 1.0).unwrap();
            (out.total, vec![lp, v])
        });
        assert!(r.ok(1e-4), "ppo rel err {:.3e}", r.worst);
    }
}
