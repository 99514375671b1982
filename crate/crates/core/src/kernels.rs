//! Convolution and pooling kernels on single `[c, h, w]` samples.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize) -> Self {
        ConvGeom { cin, cout, k, stride, pad, h, w, oh: out_size(h, k, stride, pad), ow: out_size(w, k, stride, pad) }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_len(&self) -> usize {
        self.cin * self.k * self.k * self.oh * self.ow
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    c_strides: (isize, isize),
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() > (m - 1) * c_strides.0.max(1) as usize + (n - 1) * c_strides.1.max(1) as usize);
    // SAFETY: the callers pass slices that cover the strided extents; the
    // debug assertion above checks the output extent.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

fn valid_range(out: usize, size: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // outputs o with 0 <= o*stride + kk - pad < size
    let (kk, pad, stride, size) = (kk as isize, pad as isize, stride as isize, size as isize);
    let lo = if pad > kk { (pad - kk + stride - 1) / stride } else { 0 };
    let hi_num = size - 1 + pad - kk;
    let hi = if hi_num < 0 { 0 } else { (hi_num / stride + 1).min(out as isize) };
    if hi <= lo {
        return (0, 0);
    }
    (lo as usize, hi as usize)
}

pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.oh * g.ow;
    for c in 0..g.cin {
        for ky in 0..g.k {
            let (y_lo, y_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (x_lo, x_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                row.iter_mut().for_each(|v| *v = 0.0);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &x[(c * g.h + iy) * g.w..][..g.w];
                    let dst = &mut row[oy * g.ow..][..g.ow];
                    for ox in x_lo..x_hi {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

pub fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.oh * g.ow;
    for c in 0..g.cin {
        for ky in 0..g.k {
            let (y_lo, y_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (x_lo, x_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut dx[(c * g.h + iy) * g.w..][..g.w];
                    let src = &row[oy * g.ow..][..g.ow];
                    for ox in x_lo..x_hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Dense convolution of one sample; `w` is `[cout, cin, k, k]`.
pub fn dense_forward(x: &[f32], w: &[f32], g: &ConvGeom, y: &mut [f32], col: &mut Vec<f32>) {
    let p = g.oh * g.ow;
    let kdim = g.cin * g.k * g.k;
    if g.is_pointwise() {
        sgemm(g.cout, kdim, p, w, (kdim as isize, 1), x, (p as isize, 1), y, (p as isize, 1), 0.0);
    } else {
        col.resize(g.col_len(), 0.0);
        im2col(x, g, col);
        sgemm(g.cout, kdim, p, w, (kdim as isize, 1), col, (p as isize, 1), y, (p as isize, 1), 0.0);
    }
}

/// Accumulates `dw` and, if requested, `dx` for one sample.
pub fn dense_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dw: &mut [f32],
    dx: Option<&mut [f32]>,
    col: &mut Vec<f32>,
) {
    let p = g.oh * g.ow;
    let kdim = g.cin * g.k * g.k;
    if g.is_pointwise() {
        // dW[cout, cin] += dY[cout, p] * X^T[p, cin]
        sgemm(g.cout, p, kdim, dy, (p as isize, 1), x, (1, p as isize), dw, (kdim as isize, 1), 1.0);
        if let Some(dx) = dx {
            // dX[cin, p] += W^T[cin, cout] * dY[cout, p]
            sgemm(kdim, g.cout, p, w, (1, kdim as isize), dy, (p as isize, 1), dx, (p as isize, 1), 1.0);
        }
        return;
    }
    col.resize(g.col_len(), 0.0);
    im2col(x, g, col);
    sgemm(g.cout, p, kdim, dy, (p as isize, 1), col, (1, p as isize), dw, (kdim as isize, 1), 1.0);
    if let Some(dx) = dx {
        sgemm(kdim, g.cout, p, w, (1, kdim as isize), dy, (p as isize, 1), col, (p as isize, 1), 0.0);
        col2im(col, g, dx);
    }
}

/// Depthwise convolution of one sample; `w` is `[c, 1, k, k]`.
pub fn depthwise_forward(x: &[f32], w: &[f32], g: &ConvGeom, y: &mut [f32]) {
    let (k, s, pad) = (g.k, g.stride, g.pad);
    y.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..][..g.h * g.w];
        let yc = &mut y[c * g.oh * g.ow..][..g.oh * g.ow];
        let wc = &w[c * k * k..][..k * k];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(g.oh, g.h, ky, s, pad);
            for kx in 0..k {
                let wv = wc[ky * k + kx];
                let (x_lo, x_hi) = valid_range(g.ow, g.w, kx, s, pad);
                if x_lo == x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - pad;
                    let src = &xc[iy * g.w..][..g.w];
                    let dst = &mut yc[oy * g.ow..][..g.ow];
                    if s == 1 {
                        let off = kx as isize - pad as isize;
                        let src = &src[(x_lo as isize + off) as usize..(x_hi as isize + off) as usize];
                        for (d, &v) in dst[x_lo..x_hi].iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            dst[ox] += wv * src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

pub fn depthwise_backward(x: &[f32], w: &[f32], dy: &[f32], g: &ConvGeom, dw: &mut [f32], mut dx: Option<&mut [f32]>) {
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..][..g.h * g.w];
        let dyc = &dy[c * g.oh * g.ow..][..g.oh * g.ow];
        let wc = &w[c * k * k..][..k * k];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(g.oh, g.h, ky, s, pad);
            for kx in 0..k {
                let wv = wc[ky * k + kx];
                let (x_lo, x_hi) = valid_range(g.ow, g.w, kx, s, pad);
                if x_lo == x_hi {
                    continue;
                }
                let mut acc = 0.0f32;
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - pad;
                    let src = &xc[iy * g.w..][..g.w];
                    let d = &dyc[oy * g.ow..][..g.ow];
                    for ox in x_lo..x_hi {
                        acc += d[ox] * src[ox * s + kx - pad];
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxr = &mut dx[(c * g.h + iy) * g.w..][..g.w];
                        for ox in x_lo..x_hi {
                            dxr[ox * s + kx - pad] += wv * d[ox];
                        }
                    }
                }
                dw[c * k * k + ky * k + kx] += acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
/// 3x3 stride-2 max pooling with padding 1; returns argmax indices.
pub fn maxpool_forward(x: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize, y: &mut [f32], arg: &mut [u32]) {
    for ch in 0..c {
        let xc = &x[ch * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if xc[i] > best {
                            best = xc[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                y[o] = best;
                arg[o] = (ch * h * w + best_i) as u32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn naive(x: &[f32], w: &[f32], g: &ConvGeom, depthwise: bool) -> Vec<f32> {
        let mut y = vec![0.0; g.cout * g.oh * g.ow];
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    let inputs: Vec<usize> = if depthwise { vec![o] } else { (0..g.cin).collect() };
                    for (ii, &i) in inputs.iter().enumerate() {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let wi =
                                    if depthwise { (o * g.k + ky) * g.k + kx } else { ((o * g.cin + ii) * g.k + ky) * g.k + kx };
                                acc += w[wi] * x[(i * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    y[(o * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 11) as f32 - 5.0) * scale).collect()
    }

    #[test]
    fn dense_matches_naive() {
        for &(k, s, p, h, w) in &[(3, 2, 1, 7, 6), (1, 1, 0, 4, 5), (3, 1, 1, 5, 5), (5, 2, 2, 9, 4)] {
            let g = ConvGeom::new(3, 4, k, s, p, h, w);
            let x = ramp(3 * h * w, 0.1);
            let wt = ramp(4 * 3 * k * k, 0.05);
            let mut y = vec![0.0; 4 * g.oh * g.ow];
            dense_forward(&x, &wt, &g, &mut y, &mut Vec::new());
            let r = naive(&x, &wt, &g, false);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn depthwise_matches_naive() {
        for &(k, s, p, h, w) in &[
            (3, 2, 1, 7, 6),
            (5, 1, 2, 6, 6),
            (5, 2, 2, 3, 3),
            (3, 1, 1, 1, 1),
            (5, 1, 2, 1, 1),
            (5, 1, 2, 2, 1),
            (5, 2, 2, 1, 2),
        ] {
            let g = ConvGeom::new(4, 4, k, s, p, h, w);
            let x = ramp(4 * h * w, 0.1);
            let wt = ramp(4 * k * k, 0.05);
            let mut y = vec![0.0; 4 * g.oh * g.ow];
            depthwise_forward(&x, &wt, &g, &mut y);
            let r = naive(&x, &wt, &g, true);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    /// <dy, conv(x)> is bilinear, so its gradients are checked against the
    /// forward pass with basis perturbations.
    fn check_backward(depthwise: bool, k: usize, s: usize, p: usize) {
        let (cin, h, w) = (3usize, 6usize, 5usize);
        let cout = if depthwise { cin } else { 2 };
        let g = ConvGeom::new(cin, cout, k, s, p, h, w);
        let x = ramp(cin * h * w, 0.1);
        let wlen = if depthwise { cin * k * k } else { cout * cin * k * k };
        let wt = ramp(wlen, 0.07);
        let dy = ramp(cout * g.oh * g.ow, 0.03);
        let fwd = |x: &[f32], wt: &[f32]| -> f64 {
            let mut y = vec![0.0; cout * g.oh * g.ow];
            if depthwise {
                depthwise_forward(x, wt, &g, &mut y);
            } else {
                dense_forward(x, wt, &g, &mut y, &mut Vec::new());
            }
            y.iter().zip(&dy).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let mut dw = vec![0.0; wlen];
        let mut dx = vec![0.0; x.len()];
        if depthwise {
            depthwise_backward(&x, &wt, &dy, &g, &mut dw, Some(&mut dx));
        } else {
            dense_backward(&x, &wt, &dy, &g, &mut dw, Some(&mut dx), &mut Vec::new());
        }
        let base = fwd(&x, &wt);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1.0;
            assert!(((fwd(&xp, &wt) - base) - dx[i] as f64).abs() < 1e-4, "dx[{i}]");
        }
        for i in 0..wlen {
            let mut wp = wt.clone();
            wp[i] += 1.0;
            assert!(((fwd(&x, &wp) - base) - dw[i] as f64).abs() < 1e-4, "dw[{i}]");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        for &(k, s, p) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 2, 2)] {
            check_backward(false, k, s, p);
            check_backward(true, k, s, p);
        }
    }
}
