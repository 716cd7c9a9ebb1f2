/// Generalized advantage estimation over one contiguous env stream.
///
/// `δ_t = r_t + γ·V_{t+1}·(1−done_t) − V_t` and
/// `Â_t = δ_t + γλ·(1−done_t)·Â_{t+1}`, with `V_{T}` = `bootstrap` at the
/// truncation point. Returns `(Â, V̂)` where `V̂_t = Â_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    debug_assert_eq!(values.len(), n);
    debug_assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * cont - values[t];
        next_adv = delta + gamma * lambda * cont * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// In-place `Â ← (Â − mean) / (std + 1e-8)` over the update batch.
pub fn advantage_normalize(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    #[test]
    fn single_terminal_step() {
        // γ = λ = 1, r = 1, V = 0, done → Â = 1, V̂ = 1
        let (adv, ret) = compute_gae(&[1.0], &[0.0], &[true], 99.0, 1.0, 1.0);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn self_consistent_values_zero_advantage() {
        // rewards 0, V ≡ c, γ = 1, non-terminal chain → δ ≡ 0 given a
        // matching bootstrap.
        let c = 0.7;
        let n = 20;
        let (adv, ret) =
            compute_gae(&vec![0.0; n], &vec![c; n], &vec![false; n], c, 1.0, 0.95);
        for (a, r) in adv.iter().zip(&ret) {
            assert!(a.abs() < 1e-12);
            assert!((r - c).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = stream_rng(3, Stream::Init, 0);
        let n = 50;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dones = vec![false; n];
        dones[17] = true;
        dones[38] = true;
        let bootstrap = 0.37;
        let (gamma, lambda) = (0.97, 0.9);
        let (adv, _) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda);

        // brute force: Â_t = Σ_k (γλ)^k δ_{t+k} until the episode break
        let next_v = |t: usize| {
            if dones[t] {
                0.0
            } else if t + 1 < n {
                values[t + 1]
            } else {
                bootstrap
            }
        };
        for t in 0..n {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let delta = rewards[k] + gamma * next_v(k) - values[k];
                acc += w * delta;
                if dones[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            assert!((adv[t] - acc).abs() <= 1e-10, "t={t}: {} vs {acc}", adv[t]);
        }
    }

    #[test]
    fn lambda_zero_is_one_step_td() {
        let mut rng = stream_rng(4, Stream::Init, 0);
        let n = 30;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dones = vec![false; n];
        let bootstrap = -0.2;
        let gamma = 0.93;
        let (adv, _) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, 0.0);
        for t in 0..n {
            let nv = if t + 1 < n { values[t + 1] } else { bootstrap };
            let td = rewards[t] + gamma * nv - values[t];
            assert!((adv[t] - td).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_one_gamma_one_is_monte_carlo_minus_baseline() {
        let mut rng = stream_rng(5, Stream::Init, 0);
        let n = 25;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dones = vec![false; n];
        dones[n - 1] = true; // full episode
        let (adv, _) = compute_gae(&rewards, &values, &dones, 0.0, 1.0, 1.0);
        for t in 0..n {
            let mc: f64 = rewards[t..].iter().sum();
            assert!((adv[t] - (mc - values[t])).abs() <= 1e-10);
        }
    }

    #[test]
    fn normalize_constant_gives_zeros() {
        let mut adv = vec![3.5; 10];
        advantage_normalize(&mut adv);
        assert!(adv.iter().all(|a| a.abs() < 1e-9));
    }

    #[test]
    fn normalize_moments_and_order() {
        let mut rng = stream_rng(6, Stream::Init, 0);
        let mut adv: Vec<f64> = (0..512).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let before = adv.clone();
        advantage_normalize(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / n - mean * mean).sqrt();
        assert!(mean.abs() <= 1e-10, "mean {mean}");
        assert!((std - 1.0).abs() <= 1e-6, "std {std}");
        // argsort unchanged (monotone affine map)
        let mut order_before: Vec<usize> = (0..before.len()).collect();
        order_before.sort_by(|&a, &b| before[a].total_cmp(&before[b]));
        let mut order_after: Vec<usize> = (0..adv.len()).collect();
        order_after.sort_by(|&a, &b| adv[a].total_cmp(&adv[b]));
        assert_eq!(order_before, order_after);
    }
}
