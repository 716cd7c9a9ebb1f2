use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::GaussianAction;
use rand::Rng;

/// Closed-form KL divergence between diagonal Gaussians, teacher first:
/// `D_KL(p‖q) = Σ_dim [ ln(σ_q/σ_p) + (σ_p² + (μ_p − μ_q)²)/(2σ_q²) − ½ ]`.
pub fn kl_gaussian(p: &GaussianAction, q: &GaussianAction) -> f64 {
    let mut kl = 0.0;
    for i in 0..3 {
        let (sp, sq) = (p.log_std[i].exp(), q.log_std[i].exp());
        let dm = p.mean[i] - q.mean[i];
        kl += q.log_std[i] - p.log_std[i] + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
    }
    kl
}

/// Monte Carlo estimate `E_{a~p}[log p(a) − log q(a)]` with its standard
/// error.
pub fn kl_gaussian_monte_carlo(
    p: &GaussianAction,
    q: &GaussianAction,
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let a = p.sample(rng);
        let v = p.log_prob(&a) - q.log_prob(&a);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Differentiable batched KL against constant teacher parameters.
///
/// `teacher_mean`/`teacher_log_std` are `[B, 3]` constants; the student's
/// `mean [B, 3]` and `log_std [3]` are tape variables (the gradient flows
/// into the student only). Returns the per-sample KL vector `[B]`.
pub fn kl_gaussian_taped(
    teacher_mean: &Tensor,
    teacher_log_std: &Tensor,
    student_mean: &Var,
    student_log_std: &Var,
) -> Result<Var> {
    let b = student_mean.shape()[0];
    if teacher_mean.shape() != [b, 3] || teacher_log_std.shape() != [b, 3] {
        return Err(Error::shape(format!(
            "teacher parameters {:?}/{:?} vs batch {b}",
            teacher_mean.shape(),
            teacher_log_std.shape()
        )));
    }
    let tape = student_mean.tape();
    let p_mean = tape.leaf(teacher_mean);
    let p_ls = tape.leaf(teacher_log_std);
    let q_ls = student_log_std.broadcast_rows(b)?;

    // ln σ_q − ln σ_p
    let log_ratio = q_ls.sub(&p_ls)?;
    // (σ_p² + (μ_p − μ_q)²) / (2 σ_q²)
    let var_p = p_ls.mul_scalar(2.0).exp();
    let dm2 = p_mean.sub(student_mean)?.square();
    let inv_2var_q = q_ls.mul_scalar(-2.0).exp().mul_scalar(0.5);
    let quad = var_p.add(&dm2)?.mul(&inv_2var_q)?;
    log_ratio.add(&quad)?.add_scalar(-0.5).row_sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn g(mean: [f64; 3], log_std: [f64; 3]) -> GaussianAction {
        GaussianAction { mean, log_std }
    }

    #[test]
    fn identical_distributions_have_zero_kl() {
        let p = g([0.3, -0.7, 1.2], [0.1, -0.5, 0.0]);
        assert_eq!(kl_gaussian(&p, &p), 0.0);
    }

    #[test]
    fn unit_mean_shift_is_half_per_dimension() {
        // p = N(0,1), q = N(1,1) per dim → 0.5 each, 1.5 total
        let p = g([0.0; 3], [0.0; 3]);
        let q = g([1.0; 3], [0.0; 3]);
        assert!((kl_gaussian(&p, &q) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn wide_student_grows_like_log_sigma() {
        let p = g([0.0; 3], [0.0; 3]);
        let mut prev = kl_gaussian(&p, &g([0.0; 3], [1.0; 3]));
        for ls in [2.0, 3.0, 5.0, 8.0] {
            let kl = kl_gaussian(&p, &g([0.0; 3], [ls; 3]));
            assert!(kl > prev, "not monotone at log σ_q = {ls}");
            // dominated by Σ ln σ_q = 3·ls as σ_q → ∞
            assert!((kl - 3.0 * ls).abs() / (3.0 * ls) < 0.5, "kl {kl} vs 3ls {}", 3.0 * ls);
            prev = kl;
        }
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        let mut rng = stream_rng(0, Stream::Eval, 7);
        for trial in 0..20 {
            let mut draw = stream_rng(trial, Stream::Init, 4);
            let r = |rng: &mut rand_chacha::ChaCha8Rng| {
                use rand::Rng;
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
            };
            let ls = |rng: &mut rand_chacha::ChaCha8Rng| {
                use rand::Rng;
                [rng.gen_range(-1.0..0.5), rng.gen_range(-1.0..0.5), rng.gen_range(-1.0..0.5)]
            };
            let p = g(r(&mut draw), ls(&mut draw));
            let q = g(r(&mut draw), ls(&mut draw));
            let exact = kl_gaussian(&p, &q);
            let (mc, se) = kl_gaussian_monte_carlo(&p, &q, 1_000_000, &mut rng);
            assert!(
                (mc - exact).abs() <= 3.0 * se,
                "trial {trial}: exact {exact} vs mc {mc} ± {se}"
            );
        }
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = stream_rng(1, Stream::Init, 5);
        use rand::Rng;
        for _ in 0..10_000 {
            let p = g(
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                [rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0)],
            );
            let q = g(
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                [rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0)],
            );
            let kl = kl_gaussian(&p, &q);
            assert!(kl >= 0.0, "negative KL {kl}");
            // equality only when the parameters coincide
            let same = p
                .mean
                .iter()
                .zip(&q.mean)
                .chain(p.log_std.iter().zip(&q.log_std))
                .all(|(a, b)| (a - b).abs() < 1e-12);
            if kl < 1e-12 {
                assert!(same, "near-zero KL for distinct parameters");
            }
        }
    }

    #[test]
    fn taped_kl_matches_closed_form_and_gradcheck() {
        use crate::autodiff::Tape;
        use crate::gradcheck;
        let p = g([0.2, -0.3, 0.5], [-0.2, 0.1, -0.4]);
        let q_mean = Tensor::new(vec![1, 3], vec![0.5, 0.1, -0.2]).unwrap();
        let q_ls = Tensor::from_vec(vec![-0.1, 0.3, 0.2]);
        let t_mean = Tensor::new(vec![1, 3], p.mean.to_vec()).unwrap();
        let t_ls = Tensor::new(vec![1, 3], p.log_std.to_vec()).unwrap();

        let tape = Tape::new();
        let sm = tape.leaf(&q_mean);
        let sls = tape.leaf(&q_ls);
        let kl_vec = kl_gaussian_taped(&t_mean, &t_ls, &sm, &sls).unwrap();
        let q = g([0.5, 0.1, -0.2], [-0.1, 0.3, 0.2]);
        assert!((kl_vec.data()[0] - kl_gaussian(&p, &q)).abs() < 1e-12);

        let r = gradcheck::check(&[q_mean, q_ls], |tape, ins| {
            let sm = tape.param("mean", &ins[0]);
            let sls = tape.param("ls", &ins[1]);
            let kl = kl_gaussian_taped(&t_mean, &t_ls, &sm, &sls).unwrap().mean();
            (kl, vec![sm, sls])
        });
        assert!(r.ok(1e-5), "kl rel err {:.3e}", r.worst);
    }
}
