//! Raw numeric kernels shared by the tape ops. All matrices are row-major.

/// C = alpha * op(A) * op(B) + beta * C, where op transposes when requested.
/// Logical dims: op(A) is m x k, op(B) is k x n, C is m x n.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Strides describe the stored layout; transposition swaps them.
    let (a_rs, a_cs) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers the im2col matrix for one (subject, node) series.
///
/// `x` is the full batch buffer laid out [B, T, N, C]; the output `patch` is
/// [T, k*C] where row t holds the zero-padded window centered at t.
#[allow(clippy::too_many_arguments)]
pub fn im2col_series(
    x: &[f64],
    b: usize,
    n: usize,
    t_len: usize,
    n_nodes: usize,
    channels: usize,
    kernel: usize,
    patch: &mut [f64],
) {
    debug_assert_eq!(patch.len(), t_len * kernel * channels);
    let half = kernel / 2;
    let row_stride = n_nodes * channels;
    let base = b * t_len * row_stride + n * channels;
    for t in 0..t_len {
        let out_row = &mut patch[t * kernel * channels..(t + 1) * kernel * channels];
        for d in 0..kernel {
            let src_t = t as isize + d as isize - half as isize;
            let dst = &mut out_row[d * channels..(d + 1) * channels];
            if src_t < 0 || src_t >= t_len as isize {
                dst.fill(0.0);
            } else {
                let src = base + src_t as usize * row_stride;
                dst.copy_from_slice(&x[src..src + channels]);
            }
        }
    }
}

/// Scatters gradient patches back through the im2col gather (transpose of
/// `im2col_series`), accumulating into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_series(
    dpatch: &[f64],
    b: usize,
    n: usize,
    t_len: usize,
    n_nodes: usize,
    channels: usize,
    kernel: usize,
    dx: &mut [f64],
) {
    let half = kernel / 2;
    let row_stride = n_nodes * channels;
    let base = b * t_len * row_stride + n * channels;
    for t in 0..t_len {
        let in_row = &dpatch[t * kernel * channels..(t + 1) * kernel * channels];
        for d in 0..kernel {
            let src_t = t as isize + d as isize - half as isize;
            if src_t < 0 || src_t >= t_len as isize {
                continue;
            }
            let dst = base + src_t as usize * row_stride;
            let src = &in_row[d * channels..(d + 1) * channels];
            for (o, v) in dx[dst..dst + channels].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
}
