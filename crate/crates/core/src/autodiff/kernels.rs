//! Dense kernels behind the graph operators.

/// `c (+)= op(a) · op(b)` for row-major operands, where `op` optionally transposes.
///
/// `a` is `m × k` (or `k × m` when `a_t`), `b` is `k × n` (or `n × k` when `b_t`), `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every index the strides can reach.
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

/// Unfolds one `channels × h × w` sample into a `(channels·k·k) × (h·w)` patch matrix
/// for a stride-1 convolution with zero padding `k / 2`.
pub(crate) fn im2col(src: &[f64], channels: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..channels {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = ky as isize - pad;
            for kx in 0..k {
                let ox = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + oy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    shift_copy(srow, out, ox);
                }
            }
        }
    }
}

/// `out[x] = src[x + offset]`, zero outside the source row.
fn shift_copy(src: &[f64], out: &mut [f64], offset: isize) {
    let w = src.len() as isize;
    if offset.abs() >= w {
        out.fill(0.0);
        return;
    }
    if offset >= 0 {
        let o = offset as usize;
        let n = src.len() - o;
        out[..n].copy_from_slice(&src[o..]);
        out[n..].fill(0.0);
    } else {
        let o = (-offset) as usize;
        out[..o].fill(0.0);
        out[o..].copy_from_slice(&src[..src.len() - o]);
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
pub(crate) fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..channels {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = ky as isize - pad;
            for kx in 0..k {
                let ox = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let grow = &src[y * w..(y + 1) * w];
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        prow[(x as isize + ox) as usize] += grow[x];
                    }
                }
            }
        }
    }
}
