//! Elementwise and row-wise kernels with their backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{t, Scalar};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<T: Scalar> {
    /// Normalized input (x - mean) / std, before gain/bias.
    pub normed: Array2<T>,
    /// Per-row reciprocal standard deviation.
    pub rstd: Array1<T>,
}

/// Row-wise layer normalization: `y = (x - mean) / std * gain + bias`.
pub(crate) fn layer_norm<T: Scalar>(
    x: &ArrayView2<T>,
    gain: &ArrayView1<T>,
    bias: &ArrayView1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let (rows, cols) = x.dim();
    let inv_n = t::<T>(1.0 / cols as f64);
    let mut normed = Array2::<T>::zeros((rows, cols));
    let mut rstd = Array1::<T>::zeros(rows);
    let mut out = Array2::<T>::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<T>()
            * inv_n;
        let inv_std = (var + t::<T>(LN_EPS)).sqrt().recip();
        rstd[r] = inv_std;
        for c in 0..cols {
            let n = (row[c] - mean) * inv_std;
            normed[[r, c]] = n;
            out[[r, c]] = n * gain[c] + bias[c];
        }
    }
    (out, LayerNormCache { normed, rstd })
}

/// Backward of [`layer_norm`]. Returns `dx` and accumulates `dgain`/`dbias`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &ArrayView2<T>,
    gain: &ArrayView1<T>,
    cache: &LayerNormCache<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    let (rows, cols) = dy.dim();
    let inv_n = t::<T>(1.0 / cols as f64);
    let mut dx = Array2::<T>::zeros((rows, cols));
    for r in 0..rows {
        let mut sum_dn = T::zero();
        let mut sum_dn_normed = T::zero();
        for c in 0..cols {
            let g = dy[[r, c]];
            let dn = g * gain[c];
            dgain[c] = dgain[c] + g * cache.normed[[r, c]];
            dbias[c] = dbias[c] + g;
            sum_dn = sum_dn + dn;
            sum_dn_normed = sum_dn_normed + dn * cache.normed[[r, c]];
        }
        let mean_dn = sum_dn * inv_n;
        let mean_dn_normed = sum_dn_normed * inv_n;
        for c in 0..cols {
            let dn = dy[[r, c]] * gain[c];
            dx[[r, c]] = cache.rstd[r] * (dn - mean_dn - cache.normed[[r, c]] * mean_dn_normed);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU, smooth everywhere (finite differences behave).
pub(crate) fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| {
        let u = t::<T>(GELU_C) * (v + t::<T>(GELU_A) * v * v * v);
        t::<T>(0.5) * v * (T::one() + u.tanh())
    })
}

pub(crate) fn gelu_backward<T: Scalar>(dy: &Array2<T>, x: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let u = t::<T>(GELU_C) * (v + t::<T>(GELU_A) * v * v * v);
        let th = u.tanh();
        let sech2 = T::one() - th * th;
        let du = t::<T>(GELU_C) * (T::one() + t::<T>(3.0 * GELU_A) * v * v);
        let grad = t::<T>(0.5) * (T::one() + th) + t::<T>(0.5) * v * sech2 * du;
        *d = *d * grad;
    });
    dx
}

/// Row-wise softmax in place. Rows may contain `-inf` (masked positions);
/// the max subtraction ignores them, and they come out exactly zero.
pub(crate) fn softmax_rows_inplace<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Backward of row-wise softmax: `ds = p * (dp - sum(dp * p))` per row.
pub(crate) fn softmax_rows_backward<T: Scalar>(dp: &Array2<T>, p: &Array2<T>) -> Array2<T> {
    let (rows, cols) = p.dim();
    let mut ds = Array2::<T>::zeros((rows, cols));
    for r in 0..rows {
        let dot = (0..cols).map(|c| dp[[r, c]] * p[[r, c]]).sum::<T>();
        for c in 0..cols {
            ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot);
        }
    }
    ds
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax_row<T: Scalar>(row: &ArrayView1<T>) -> Array1<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.mapv(|v| v - log_z)
}

/// Low-rank adapter contribution `(alpha/r) * (z . A) . B` for activations
/// `z` of shape `[rows, d_in]`, `a: [d_in, r]`, `b: [r, d_out]`.
pub fn adapter_contribution<T: Scalar>(
    z: &ArrayView2<T>,
    a: &ArrayView2<T>,
    b: &ArrayView2<T>,
    scale: f64,
) -> Array2<T> {
    z.dot(a).dot(b) * t::<T>(scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [-3.0, 0.0, 5.0, 2.0]];
        let gain = Array1::ones(4);
        let bias = Array1::zeros(4);
        let (y, _) = layer_norm(&x.view(), &gain.view(), &bias.view());
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            let var: f64 = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_masked_exactly_zero() {
        let mut x = array![[0.5f64, 1.5, f64::NEG_INFINITY], [2.0, 2.0, 2.0]];
        softmax_rows_inplace(&mut x);
        assert_eq!(x[[0, 2]], 0.0);
        for r in 0..2 {
            let sum: f64 = x.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        let x = array![[0.0f64, 1.0, -1.0]];
        let y = gelu(&x);
        assert_eq!(y[[0, 0]], 0.0);
        assert!((y[[0, 1]] - 0.841192).abs() < 1e-5);
        assert!((y[[0, 2]] + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn adapter_scale_is_linear_in_alpha() {
        let z = array![[1.0f64, 2.0, 3.0]];
        let a = array![[0.5f64, -0.2], [0.1, 0.3], [-0.4, 0.6]];
        let b = array![[1.0f64, 0.0, -1.0], [0.2, 0.5, 0.7]];
        let rank = 2usize;
        let one = adapter_contribution(&z.view(), &a.view(), &b.view(), 4.0 / rank as f64);
        let three = adapter_contribution(&z.view(), &a.view(), &b.view(), 12.0 / rank as f64);
        for (lhs, rhs) in three.iter().zip(one.iter()) {
            assert!((lhs - 3.0 * rhs).abs() < 1e-12);
        }
    }

    /// Central-difference checks on the standalone kernels keep backward
    /// bugs localized before the full-model gradient check runs.
    #[test]
    fn kernel_finite_difference_spot_checks() {
        let x = array![[0.3f64, -1.2, 0.7], [1.1, 0.2, -0.5]];
        let gain = array![1.1f64, 0.9, 1.05];
        let bias = array![0.01f64, -0.02, 0.03];
        // scalar objective: sum of elements of layer_norm output
        let objective = |x: &Array2<f64>| {
            let (y, _) = layer_norm(&x.view(), &gain.view(), &bias.view());
            y.sum() + y.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>()
        };
        let (y, cache) = layer_norm(&x.view(), &gain.view(), &bias.view());
        // dy of the objective above
        let mut dy = Array2::<f64>::ones(y.raw_dim());
        for (i, v) in y.iter().enumerate() {
            dy.as_slice_mut().unwrap()[i] += 2.0 * (i as f64 + 1.0) * v;
        }
        let mut dgain = Array1::zeros(3);
        let mut dbias = Array1::zeros(3);
        let dx = layer_norm_backward(&dy.view(), &gain.view(), &cache, &mut dgain, &mut dbias);
        let h = 1e-6;
        for idx in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() / num.abs().max(1.0) < 1e-6,
                "layer_norm dx[{idx}]: analytic {ana} vs numeric {num}"
            );
        }

        let xg = array![[0.4f64, -0.9], [2.0, -2.5]];
        let dy = array![[1.0f64, -2.0], [0.5, 1.5]];
        let dx = gelu_backward(&dy, &xg);
        for idx in 0..4 {
            let mut xp = xg.clone();
            let mut xm = xg.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = ((gelu(&xp) * &dy).sum() - (gelu(&xm) * &dy).sum()) / (2.0 * h);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() / num.abs().max(1.0) < 1e-6,
                "gelu dx[{idx}]: analytic {ana} vs numeric {num}"
            );
        }
    }
}
