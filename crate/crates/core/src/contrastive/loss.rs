use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// One sequence's contrastive pairing: differentiable query tokens against
/// stop-gradient keys, index-aligned (key i is the positive for query i).
pub struct ContrastiveBatch {
    /// `[T, d]` Transformer outputs of the corrupted branch (on the tape).
    pub queries: Var,
    /// `[T, d]` clean-branch key embeddings (constants).
    pub keys: Tensor,
    pub mask: Vec<bool>,
    pub temperature: f64,
}

/// Masked InfoNCE pooled over one or more sequences:
/// `−(1/Σ M_i) Σ_i M_i · log[ exp(sim(q_i,k_i)/τ) / Σ_j exp(sim(q_i,k_j)/τ) ]`
/// with cosine similarity and log-sum-exp stabilization. Returns `None`
/// when no position is masked (the caller skips the update).
pub fn masked_infonce(items: &[ContrastiveBatch]) -> Result<Option<Var>> {
    let mut per_position: Vec<Var> = Vec::new();
    let mut pooled_mask: Vec<bool> = Vec::new();
    for item in items {
        if item.temperature <= 0.0 {
            return Err(Error::contract("temperature must be positive"));
        }
        let t = item.mask.len();
        if item.queries.shape()[0] != t || item.keys.shape()[0] != t {
            return Err(Error::shape(format!(
                "queries {:?} / keys {:?} vs mask of {t}",
                item.queries.shape(),
                item.keys.shape()
            )));
        }
        let logits = cosine_logits(&item.queries, &item.keys, item.temperature)?;
        per_position.push(per_position_loss(&logits)?);
        pooled_mask.extend_from_slice(&item.mask);
    }
    if !pooled_mask.iter().any(|&m| m) {
        return Ok(None);
    }
    pooled_masked_mean(&per_position, &pooled_mask).map(Some)
}

/// `sim(q_i, k_j)/τ` rows with `sim` = cosine similarity. Zero-norm rows on
/// either side are numeric errors (cosine undefined).
pub fn cosine_logits(queries: &Var, keys: &Tensor, temperature: f64) -> Result<Var> {
    let q_hat = queries.row_l2_normalize()?;
    let k_hat = normalize_rows(keys)?;
    let tape_keys = leaf_on(queries, &k_hat);
    q_hat.matmul_tb(&tape_keys).map(|s| s.mul_scalar(1.0 / temperature))
}

/// InfoNCE per-position losses from a prebuilt `[T, n]` logit matrix whose
/// diagonal holds the positives: `LSE_j(logits[i,:]) − logits[i,i]`.
pub fn infonce_from_logits(logits: &Var) -> Result<Var> {
    per_position_loss(logits)
}

fn per_position_loss(logits: &Var) -> Result<Var> {
    let lse = logits.row_log_sum_exp()?;
    let pos = logits.gather_diag()?;
    lse.sub(&pos)
}

/// Mean of the masked entries pooled across per-sequence loss vectors.
fn pooled_masked_mean(parts: &[Var], mask: &[bool]) -> Result<Var> {
    let columns: Vec<Var> = parts
        .iter()
        .map(|p| {
            let t = p.shape()[0];
            p.reshape(vec![t, 1])
        })
        .collect::<Result<_>>()?;
    let stacked = Var::concat_rows(&columns)?;
    let n = stacked.shape()[0];
    stacked.reshape(vec![n])?.masked_mean(mask)
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = t.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numeric(format!("zero-norm key row {r}: cosine undefined")));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn leaf_on(reference: &Var, t: &Tensor) -> Var {
    // Constants join the query's tape; they are not parameters, so the key
    // branch stays outside every gradient path.
    let tape = reference.tape();
    tape.leaf(t)
}

/// Fraction of masked positions whose positive key attains the maximum
/// cosine similarity among all keys. `None` when nothing is masked.
pub fn retrieval_accuracy(queries: &Tensor, keys: &Tensor, mask: &[bool]) -> Option<f64> {
    let t = mask.len();
    let d = queries.shape()[1];
    let masked: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
    if masked.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    for &i in &masked {
        let qi = &queries.data()[i * d..(i + 1) * d];
        let qn = norm(qi);
        let mut best = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..keys.shape()[0] {
            let kj = &keys.data()[j * d..(j + 1) * d];
            let sim = dot(qi, kj) / (qn * norm(kj));
            if sim > best {
                best = sim;
                best_j = j;
            }
        }
        if best_j == i {
            hits += 1;
        }
    }
    Some(hits as f64 / masked.len() as f64)
}

/// Mean Euclidean distance `(1/n) Σ ‖z_i − z_i*‖₂` between reconstructed
/// embeddings and their clean references at masked positions.
pub fn representation_drift(reconstructed: &Tensor, clean: &Tensor, mask: &[bool]) -> Option<f64> {
    let d = reconstructed.shape()[1];
    let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if masked.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &masked {
        let zi = &reconstructed.data()[i * d..(i + 1) * d];
        let zs = &clean.data()[i * d..(i + 1) * d];
        total += zi.iter().zip(zs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Some(total / masked.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::{stream_rng, Stream};

    fn batch(q: Tensor, k: Tensor, mask: Vec<bool>, tau: f64) -> (Tape, ContrastiveBatch) {
        let tape = Tape::new();
        let queries = tape.param("q", &q);
        (tape, ContrastiveBatch { queries, keys: k, mask, temperature: tau })
    }

    #[test]
    fn all_zero_mask_returns_none() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_tape, b) = batch(q.clone(), q, vec![false, false], 0.07);
        assert!(masked_infonce(&[b]).unwrap().is_none());
    }

    #[test]
    fn hand_computed_t2_case() {
        // sim(q1,k1) = 1, sim(q1,k2) = 0, τ = 0.07, only position 1 masked:
        // loss = ln(1 + e^(−1/0.07)) ≈ 6.2e−7
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_tape, b) = batch(q, k, vec![true, false], 0.07);
        let loss = masked_infonce(&[b]).unwrap().unwrap().scalar_value();
        let expect = (1.0 + (-1.0 / 0.07f64).exp()).ln();
        assert!((loss - expect).abs() <= 1e-15, "{loss} vs {expect}");
        assert!((loss - 6.2e-7).abs() <= 1e-8);
    }

    #[test]
    fn aligned_orthogonal_keys_near_zero_positive_loss() {
        // q_i == k_i, keys mutually orthogonal → tiny but strictly positive.
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let (_tape, b) = batch(eye.clone(), eye, vec![true, true, true], 0.07);
        let loss = masked_infonce(&[b]).unwrap().unwrap().scalar_value();
        assert!(loss > 0.0 && loss < 1e-5, "loss {loss}");
    }

    #[test]
    fn loss_invariant_to_query_rescaling() {
        let mut rng = stream_rng(3, Stream::Init, 0);
        let q = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let k = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let mask = vec![true, false, true, true];
        let base = {
            let (_t, b) = batch(q.clone(), k.clone(), mask.clone(), 0.07);
            masked_infonce(&[b]).unwrap().unwrap().scalar_value()
        };
        for scale in [0.5, 3.0] {
            let mut qs = q.clone();
            for v in qs.data_mut() {
                *v *= scale;
            }
            let (_t, b) = batch(qs, k.clone(), mask.clone(), 0.07);
            let scaled = masked_infonce(&[b]).unwrap().unwrap().scalar_value();
            assert!((scaled - base).abs() < 1e-12, "scale {scale}: {scaled} vs {base}");
        }
    }

    #[test]
    fn gradients_flow_only_at_masked_positions() {
        let mut rng = stream_rng(5, Stream::Init, 0);
        let q = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let k = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let (tape, b) = batch(q, k, vec![false, true, false], 0.07);
        let queries = b.queries.clone();
        let loss = masked_infonce(&[b]).unwrap().unwrap();
        loss.backward().unwrap();
        let g = queries.grad().unwrap();
        // Row 1 carries gradient; rows 0 and 2 are zero.
        assert!(g[4..8].iter().any(|&v| v != 0.0));
        assert!(g[0..4].iter().all(|&v| v == 0.0));
        assert!(g[8..12].iter().all(|&v| v == 0.0));
        assert_eq!(tape.param_names(), vec!["q".to_string()]);
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let mut rng = stream_rng(6, Stream::Init, 0);
        let q = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let k = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let mask = vec![true, true, false, true];
        let r = gradcheck::check(&[q], |tape, ins| {
            let queries = tape.param("q", &ins[0]);
            let b = ContrastiveBatch {
                queries: queries.clone(),
                keys: k.clone(),
                mask: mask.clone(),
                temperature: 0.07,
            };
            (masked_infonce(&[b]).unwrap().unwrap(), vec![queries])
        });
        assert!(r.ok(1e-4), "infonce rel err {:.3e}", r.worst);
    }

    #[test]
    fn zero_norm_query_is_numeric_error() {
        let q = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_t, b) = batch(q, k, vec![true, true], 0.07);
        assert!(matches!(masked_infonce(&[b]), Err(Error::Numeric(_))));
    }

    #[test]
    fn retrieval_accuracy_cases() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(retrieval_accuracy(&eye, &eye, &[true; 3]), Some(1.0));
        assert_eq!(retrieval_accuracy(&eye, &eye, &[false; 3]), None);

        // random queries against orthonormal keys → accuracy ≈ 1/T
        let mut rng = stream_rng(8, Stream::Init, 0);
        let t = 4;
        let mut eye4 = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            eye4.data_mut()[i * t + i] = 1.0;
        }
        let mut hits = 0.0;
        let trials = 4000;
        for _ in 0..trials {
            let q = Tensor::randn(vec![t, t], 1.0, &mut rng);
            hits += retrieval_accuracy(&q, &eye4, &[true; 4]).unwrap();
        }
        let rate = hits / trials as f64;
        assert!((rate - 0.25).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn drift_trivial_cases() {
        let z = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(representation_drift(&z, &z, &[true, true]), Some(0.0));

        let mut shifted = z.clone();
        shifted.data_mut()[0] += 1.0; // unit offset on first token
        shifted.data_mut()[3] += 1.0; // and on second
        assert_eq!(representation_drift(&shifted, &z, &[true, true]), Some(1.0));
        assert_eq!(representation_drift(&z, &z, &[false, false]), None);
    }
}
