use super::matrix::Matrix;
use super::special::{normal_cdf, normal_pdf};
use crate::error::{Error, Result};

/// Row-wise softmax. `mask[i]` true means the entry is *kept*; masked entries
/// come out exactly zero and never enter the max or the normalizer.
pub fn softmax_rows(m: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.len() != m.rows() * m.cols() {
            return Err(Error::Dimension {
                op: "softmax_rows",
                left: m.shape(),
                right: (mask.len(), 1),
            });
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let keep = mask.map(|mk| &mk[r * m.cols()..(r + 1) * m.cols()]);
        softmax_row_into(m.row(r), keep, out.row_mut(r)).map_err(|_| Error::DegenerateMask { row: r })?;
    }
    Ok(out)
}

pub(crate) fn softmax_row_into(x: &[f64], keep: Option<&[bool]>, out: &mut [f64]) -> std::result::Result<(), ()> {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if kept(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (i, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if kept(i) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if kept(i) {
            *o /= sum;
        }
    }
    Ok(())
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias` with the biased (population) variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: (1, x.len()),
            right: (gain.len(), bias.len()),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let (mean, inv_std) = mean_inv_std(x, eps);
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| g * ((v - mean) * inv_std) + b)
        .collect())
}

pub(crate) fn mean_inv_std(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Exact GELU: `x · Φ(x)` with `Φ(x) = ½(1 + erf(x/√2))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx gelu(x) = Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_constant_row_is_uniform() {
        for c in [-7.0, 0.0, 3.5, 1e3] {
            let s = softmax_rows(&Matrix::row_vector(&[c, c, c]), None).unwrap();
            for &v in s.as_slice() {
                assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 3f64.ln()]), None).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_single_survivor() {
        let s = softmax_rows(&Matrix::row_vector(&[5.0, 9.0]), Some(&[true, false])).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let err = softmax_rows(&m, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    #[test]
    fn layer_norm_cases() {
        let out = layer_norm(&[4.0, 4.0, 4.0], &[1.0; 3], &[0.0; 3], 1e-12).unwrap();
        out.iter().for_each(|v| assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9));
        let out = layer_norm(&[-1.0, 1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert_abs_diff_eq!(out[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-9);
        let out = layer_norm(&[0.3, -2.0, 7.0], &[0.0; 3], &[0.5, -1.5, 2.0], 1e-5).unwrap();
        assert_eq!(out, vec![0.5, -1.5, 2.0]);
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-2.5), 0.0);
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) from the normal table.
        assert_abs_diff_eq!(gelu(1.0), 0.841_344_746_068_542_9, epsilon = 1e-12);
        assert_abs_diff_eq!(gelu(1.0), 0.841345, epsilon = 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let m = Matrix::from_vec(3, 4, v).unwrap();
            let s = softmax_rows(&m, None).unwrap();
            for r in 0..3 {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
