//! Raw slice kernels shared by the tape ops and the reference paths.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and
/// `op(b)` of shape `k × n`, all row-major.
///
/// `a_t` means `a` is stored as `k × m`; `b_t` means `b` is stored as `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have the asserted extents and the strides above
    // address exactly those extents.
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

/// First-order linear recurrence `h_t = a_t ⊙ h_{t-1} + b_t` over rows of
/// `width` values. `h` receives one row per step.
pub fn scan_forward(a: &[f64], b: &[f64], h0: &[f64], width: usize, h: &mut [f64]) {
    let steps = a.len() / width;
    debug_assert_eq!(b.len(), a.len());
    debug_assert_eq!(h.len(), a.len());
    debug_assert_eq!(h0.len(), width);
    for t in 0..steps {
        let row = t * width..(t + 1) * width;
        if t == 0 {
            for j in 0..width {
                h[j] = a[j] * h0[j] + b[j];
            }
        } else {
            let (prev, cur) = h.split_at_mut(row.start);
            let prev = &prev[row.start - width..];
            let (a_t, b_t) = (&a[row.clone()], &b[row.clone()]);
            for j in 0..width {
                cur[j] = a_t[j] * prev[j] + b_t[j];
            }
        }
    }
}

/// Reverse pass of [`scan_forward`].
///
/// On entry `gh` holds the direct loss gradient for each `h_t`; on exit it
/// holds the total gradient, which is also the gradient for `b_t`. `ga` is
/// overwritten and `gh0` receives the gradient for the initial state.
pub fn scan_backward(
    a: &[f64],
    h0: &[f64],
    h: &[f64],
    width: usize,
    gh: &mut [f64],
    ga: &mut [f64],
    gh0: &mut [f64],
) {
    let steps = a.len() / width;
    for t in (0..steps).rev() {
        let base = t * width;
        if t + 1 < steps {
            let (cur, next) = gh.split_at_mut(base + width);
            let cur = &mut cur[base..];
            let a_next = &a[base + width..base + 2 * width];
            for j in 0..width {
                cur[j] += a_next[j] * next[j];
            }
        }
        let prev = if t == 0 {
            h0
        } else {
            &h[base - width..base]
        };
        for j in 0..width {
            ga[base + j] = gh[base + j] * prev[j];
        }
    }
    if steps > 0 {
        for j in 0..width {
            gh0[j] = a[j] * gh[j];
        }
    } else {
        gh0.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Causal depthwise convolution over `[seqs, steps, channels]`:
/// `y[t, c] = Σ_j w[j, c] · x[t - k + 1 + j, c]` with zero left padding.
pub fn causal_conv_forward(
    x: &[f64],
    w: &[f64],
    seqs: usize,
    steps: usize,
    channels: usize,
    y: &mut [f64],
) {
    let k = w.len() / channels;
    for s in 0..seqs {
        let base = s * steps * channels;
        for t in 0..steps {
            let out = &mut y[base + t * channels..base + (t + 1) * channels];
            out.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let xs = &x[base + src as usize * channels..base + (src as usize + 1) * channels];
                let wj = &w[j * channels..(j + 1) * channels];
                for c in 0..channels {
                    out[c] += wj[c] * xs[c];
                }
            }
        }
    }
}

/// Accumulates input and kernel gradients of [`causal_conv_forward`].
#[allow(clippy::too_many_arguments)]
pub fn causal_conv_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    seqs: usize,
    steps: usize,
    channels: usize,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let k = w.len() / channels;
    if let Some(gx) = gx {
        for s in 0..seqs {
            let base = s * steps * channels;
            for t in 0..steps {
                let g = &gy[base + t * channels..base + (t + 1) * channels];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src < 0 {
                        continue;
                    }
                    let o = base + src as usize * channels;
                    let wj = &w[j * channels..(j + 1) * channels];
                    for c in 0..channels {
                        gx[o + c] += wj[c] * g[c];
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for s in 0..seqs {
            let base = s * steps * channels;
            for t in 0..steps {
                let g = &gy[base + t * channels..base + (t + 1) * channels];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src < 0 {
                        continue;
                    }
                    let xs = &x[base + src as usize * channels..];
                    let gwj = &mut gw[j * channels..(j + 1) * channels];
                    for c in 0..channels {
                        gwj[c] += g[c] * xs[c];
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn scan_two_steps() {
        let mut h = [0.0; 2];
        scan_forward(&[0.5, 0.5], &[1.0, 1.0], &[0.0], 1, &mut h);
        assert_eq!(h, [1.0, 1.5]);
    }

    #[test]
    fn conv_hand_example() {
        let mut y = [0.0; 3];
        causal_conv_forward(&[1.0, 2.0, 3.0], &[1.0, 1.0], 1, 3, 1, &mut y);
        assert_eq!(y, [1.0, 3.0, 5.0]);
    }
}
