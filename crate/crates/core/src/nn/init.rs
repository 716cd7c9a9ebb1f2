use crate::autodiff::Tensor;
use rand::Rng;

/// Orthogonal initialization: a `[rows, cols]` matrix with orthonormal rows
/// (when rows <= cols) or orthonormal columns (otherwise), scaled by `gain`.
///
/// Built from a Gaussian draw followed by modified Gram-Schmidt on the
/// smaller side.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let transpose = rows < cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    // n >= m: orthonormalize the m columns of an n x m Gaussian matrix.
    let a = Tensor::randn(vec![n, m], 1.0, rng);
    let a = a.data();
    let mut q = vec![0.0; n * m];
    for j in 0..m {
        let mut v: Vec<f64> = (0..n).map(|i| a[i * m + j]).collect();
        for prev in 0..j {
            let mut proj = 0.0;
            for i in 0..n {
                proj += q[i * m + prev] * v[i];
            }
            for i in 0..n {
                v[i] -= proj * q[i * m + prev];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..n {
            q[i * m + j] = v[i] / norm;
        }
    }
    let data = if transpose {
        // rows of the output are the columns of q
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = gain * q[c * m + r];
            }
        }
        out
    } else {
        q.iter().map(|&v| gain * v).collect()
    };
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}
