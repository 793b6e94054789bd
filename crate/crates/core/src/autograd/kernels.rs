//! Numeric kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` for row/column-strided matrices.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds above cover every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Splits `shape` around `axis` into `(outer, dim, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Unfolds one `[cin, len]` sample into `[cin*kernel, out_len]` columns.
pub(crate) fn im2col(
    x: &[f64],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    cols: &mut [f64],
) {
    for ci in 0..cin {
        let xs = &x[ci * len..(ci + 1) * len];
        for j in 0..kernel {
            let row = &mut cols[(ci * kernel + j) * out_len..(ci * kernel + j + 1) * out_len];
            for (o, slot) in row.iter_mut().enumerate() {
                let pos = (o * stride + j) as isize - pad as isize;
                *slot = if pos >= 0 && (pos as usize) < len {
                    xs[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(
    cols: &[f64],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    dx: &mut [f64],
) {
    for ci in 0..cin {
        let xs = &mut dx[ci * len..(ci + 1) * len];
        for j in 0..kernel {
            let row = &cols[(ci * kernel + j) * out_len..(ci * kernel + j + 1) * out_len];
            for (o, &g) in row.iter().enumerate() {
                let pos = (o * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    xs[pos as usize] += g;
                }
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (shape `shape`) into `dst` laid out as `shape` permuted by `perm`.
pub(crate) fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for slot in dst.iter_mut() {
        *slot = src[offset];
        // odometer increment over the output index
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
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

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place numerically stable softmax over contiguous rows of width `w`.
pub(crate) fn softmax_rows(data: &mut [f64], w: usize) {
    for row in data.chunks_mut(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
