use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// With `trans_a` set, `a` is stored as `[k, m]`; likewise `trans_b` means `b` is stored `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let av = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

pub(crate) fn softmax_row(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let is_on = |j: usize| allowed.map_or(true, |a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if is_on(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        // every key masked out: emit a zero row rather than NaN
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if is_on(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}
