//! Raw slice kernels shared by the tensor ops and the tape.

/// `c (+)= a · b` for an `m×k` by `k×n` product with arbitrary strides
/// given as `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of every addressed element are asserted above and the
    // output is a distinct, exclusively borrowed buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax over `cols`-wide rows, skipping masked-out entries.
///
/// `allowed` (when present) is a `rows × cols` visibility map; excluded
/// entries get probability exactly zero. A row with nothing visible is all zeros.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let vis = allowed.map(|m| &m[r * cols..(r + 1) * cols]);
        let visible = |j: usize| vis.is_none_or(|v| v[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if visible(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if visible(j) {
                let e = (v - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
