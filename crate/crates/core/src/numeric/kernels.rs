//! Dense kernels shared by the graph operations. All buffers are row-major.

/// `c = op(a) · op(b) + beta · c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the buffer `a` holds a `k×m` matrix; with `trans_b` the
/// buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length of a 1-d convolution, or `None` when the kernel does not fit.
pub fn conv_out_len(time: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = time + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds `x` (`channels×time`) into a `(channels·kernel)×out_len` matrix.
pub fn im2col(
    x: &[f64],
    channels: usize,
    time: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; channels * kernel * out_len];
    for c in 0..channels {
        let src = &x[c * time..(c + 1) * time];
        for j in 0..kernel {
            let dst = &mut cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < time {
                    *d = src[pos as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    channels: usize,
    time: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    dx: &mut [f64],
) {
    for c in 0..channels {
        for j in 0..kernel {
            let src = &cols[(c * kernel + j) * out_len..(c * kernel + j + 1) * out_len];
            for (t, v) in src.iter().enumerate() {
                let pos = (t * stride + j) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < time {
                    dx[c * time + pos as usize] += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_lengths() {
        assert_eq!(conv_out_len(1000, 3, 2, 1), Some(500));
        assert_eq!(conv_out_len(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out_len(2, 5, 1, 1), None);
    }
}
