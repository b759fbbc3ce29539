//! Plain (non-recorded) numeric kernels.

use super::tape::softmax_slice;
use super::{Tensor, TensorError};

/// Numerically stable softmax with max subtraction.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>, TensorError> {
    if x.is_empty() {
        return Err(TensorError::Empty("softmax"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            index: x.iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    Ok(softmax_slice(x).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::Shape {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `Σ_abc x_a v_b p_c W_abc` for a dense `[D, D, D]` weight tensor.
pub fn trilinear_dense(x: &[f64], v: &[f64], p: &[f64], w: &Tensor) -> Result<f64, TensorError> {
    let d = x.len();
    if v.len() != d || p.len() != d || w.shape() != [d, d, d] {
        return Err(TensorError::Shape {
            op: "trilinear_dense",
            lhs: vec![d, v.len(), p.len()],
            rhs: w.shape().to_vec(),
        });
    }
    let wd = w.data();
    let mut total = 0.0;
    for a in 0..d {
        for b in 0..d {
            let xv = x[a] * v[b];
            let base = (a * d + b) * d;
            for c in 0..d {
                total += xv * p[c] * wd[base + c];
            }
        }
    }
    Ok(total)
}

/// `Σ_k (U x)_k (V v)_k (T p)_k` with `U`, `V`, `T` of shape `[r, D]`, which
/// equals the dense form with `W_abc = Σ_k U_ka V_kb T_kc`.
pub fn trilinear_factorized(
    x: &[f64],
    v: &[f64],
    p: &[f64],
    u: &Tensor,
    vw: &Tensor,
    t: &Tensor,
) -> Result<f64, TensorError> {
    let (r, d) = u.dims2()?;
    if vw.shape() != [r, d] || t.shape() != [r, d] || x.len() != d || v.len() != d || p.len() != d {
        return Err(TensorError::Shape {
            op: "trilinear_factorized",
            lhs: vec![x.len(), v.len(), p.len()],
            rhs: u.shape().to_vec(),
        });
    }
    let proj = |m: &Tensor, z: &[f64], k: usize| -> f64 {
        m.data()[k * d..(k + 1) * d]
            .iter()
            .zip(z)
            .map(|(a, b)| a * b)
            .sum()
    };
    Ok((0..r)
        .map(|k| proj(u, x, k) * proj(vw, v, k) * proj(t, p, k))
        .sum())
}

/// Expands rank factors into the dense `[D, D, D]` tensor.
pub fn expand_factors(u: &Tensor, v: &Tensor, t: &Tensor) -> Result<Tensor, TensorError> {
    let (r, d) = u.dims2()?;
    let mut w = vec![0.0; d * d * d];
    for k in 0..r {
        for a in 0..d {
            for b in 0..d {
                let uv = u.at(k, a) * v.at(k, b);
                for c in 0..d {
                    w[(a * d + b) * d + c] += uv * t.at(k, c);
                }
            }
        }
    }
    Tensor::new(vec![d, d, d], w)
}
