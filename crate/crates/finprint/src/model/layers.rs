//! Layer kernels: 3x3 same-padding convolution via im2col + matrix
//! multiplication, 2x2 max pooling with argmax caching, and their adjoints.
//!
//! All feature maps are `(N, H, W, C)` in standard row-major layout; the
//! im2col patch matrix is `(N*H*W, 9*C)` with column index
//! `(dy*3 + dx)*C + c`.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4};

/// Zero-pad H and W by one pixel on each side.
pub fn pad1(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, h, w, c) = dims(&x);
    let mut out = Array4::zeros((n, h + 2, w + 2, c));
    out.slice_mut(ndarray::s![.., 1..h + 1, 1..w + 1, ..])
        .assign(&x);
    out
}

/// Patch matrix of a padded `(N, H+2, W+2, C)` input for a 3x3 kernel.
pub fn im2col3x3(padded: &Array4<f64>, h: usize, w: usize) -> Array2<f64> {
    let n = padded.shape()[0];
    let c = padded.shape()[3];
    let wp = w + 2;
    let pv = padded.as_slice().expect("padded input is standard layout");
    let mut cols = Array2::zeros((n * h * w, 9 * c));
    let cv = cols.as_slice_mut().expect("cols is standard layout");
    let row_elems = 9 * c;
    for ni in 0..n {
        let pbase = ni * (h + 2) * wp * c;
        for y in 0..h {
            for x in 0..w {
                let row = ((ni * h + y) * w + x) * row_elems;
                // For each kernel row the three horizontal taps are
                // contiguous in the padded image, so one copy moves 3*C
                // values.
                for dy in 0..3 {
                    let src = pbase + ((y + dy) * wp + x) * c;
                    let dst = row + dy * 3 * c;
                    cv[dst..dst + 3 * c].copy_from_slice(&pv[src..src + 3 * c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatter-add patch gradients back to an
/// unpadded `(N, H, W, C)` input gradient.
pub fn col2im3x3(dcols: ArrayView2<f64>, n: usize, h: usize, w: usize, c: usize) -> Array4<f64> {
    let wp = w + 2;
    let hp = h + 2;
    let mut padded = Array4::zeros((n, hp, wp, c));
    {
        let pv = padded.as_slice_mut().expect("padded grad is standard layout");
        let dv = dcols.to_slice().expect("dcols is standard layout");
        let row_elems = 9 * c;
        for ni in 0..n {
            let pbase = ni * hp * wp * c;
            for y in 0..h {
                for x in 0..w {
                    let row = ((ni * h + y) * w + x) * row_elems;
                    for dy in 0..3 {
                        let dst = pbase + ((y + dy) * wp + x) * c;
                        let src = row + dy * 3 * c;
                        for k in 0..3 * c {
                            pv[dst + k] += dv[src + k];
                        }
                    }
                }
            }
        }
    }
    padded.slice(ndarray::s![.., 1..h + 1, 1..w + 1, ..]).to_owned()
}

/// 3x3 same-padding convolution, bias, ReLU. Weights are `(F, 9*C)`.
///
/// Returns the activation map and the patch matrix, which the backward
/// pass reuses.
pub fn conv3x3_forward(
    x: ArrayView4<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
) -> (Array4<f64>, Array2<f64>) {
    let (n, h, w, _c) = dims(&x);
    let f = weight.shape()[0];
    let padded = pad1(x);
    let cols = im2col3x3(&padded, h, w);
    let mut out2d = cols.dot(&weight.t());
    out2d += bias;
    out2d.mapv_inplace(|v| v.max(0.0));
    let out = out2d
        .into_shape_with_order((n, h, w, f))
        .expect("conv output reshape");
    (out, cols)
}

/// Direct stencil convolution for single-channel input: the `(N*H*W, 9)`
/// patch matrix makes a degenerate matrix product, so the input block is
/// better served by plain multiply-add passes.
///
/// Dispatches to an AVX2-compiled copy of the same loop when the CPU has
/// it. Only independent lanes are vectorized (no fused multiply-add
/// contraction), so both paths produce bit-identical results.
pub fn conv3x3_forward_c1(
    x: ArrayView4<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
) -> Array4<f64> {
    let (n, h, w, _) = dims(&x);
    let f = weight.shape()[0];
    let padded = pad1(x);
    let pv = padded.as_slice().expect("standard layout");
    let bv = bias.as_slice().expect("standard layout");
    let wv = weight.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, h, w, f));
    let ov = out.as_slice_mut().expect("standard layout");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked above.
            unsafe { conv_c1_kernel_avx2(pv, wv, bv, ov, n, h, w, f) };
            return out;
        }
    }
    conv_c1_kernel(pv, wv, bv, ov, n, h, w, f);
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_c1_kernel_avx2(
    pv: &[f64],
    wv: &[f64],
    bv: &[f64],
    ov: &mut [f64],
    n: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    conv_c1_kernel(pv, wv, bv, ov, n, h, w, f);
}

#[inline(always)]
fn conv_c1_kernel(
    pv: &[f64],
    wv: &[f64],
    bv: &[f64],
    ov: &mut [f64],
    n: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    // Monomorphic accumulator widths keep the per-pixel accumulator in
    // registers; other widths fall back to the dynamic loop.
    match f {
        4 => conv_c1_fixed::<4>(pv, wv, bv, ov, n, h, w),
        8 => conv_c1_fixed::<8>(pv, wv, bv, ov, n, h, w),
        16 => conv_c1_fixed::<16>(pv, wv, bv, ov, n, h, w),
        _ => conv_c1_dyn(pv, wv, bv, ov, n, h, w, f),
    }
}

#[inline(always)]
fn conv_c1_fixed<const F: usize>(
    pv: &[f64],
    wv: &[f64],
    bv: &[f64],
    ov: &mut [f64],
    n: usize,
    h: usize,
    w: usize,
) {
    let wp = w + 2;
    let mut taps = [[0.0f64; F]; 9];
    for (tap, tw) in taps.iter_mut().enumerate() {
        for (fi, v) in tw.iter_mut().enumerate() {
            *v = wv[fi * 9 + tap];
        }
    }
    let mut bias = [0.0f64; F];
    bias.copy_from_slice(bv);
    for ni in 0..n {
        let pbase = ni * (h + 2) * wp;
        for y in 0..h {
            let rows = [
                &pv[pbase + y * wp..pbase + (y + 1) * wp],
                &pv[pbase + (y + 1) * wp..pbase + (y + 2) * wp],
                &pv[pbase + (y + 2) * wp..pbase + (y + 3) * wp],
            ];
            let orow = &mut ov[((ni * h + y) * w) * F..((ni * h + y + 1) * w) * F];
            for x_ in 0..w {
                let mut acc = bias;
                for (dy, row) in rows.iter().enumerate() {
                    for dx in 0..3 {
                        let p = row[x_ + dx];
                        let tw = &taps[dy * 3 + dx];
                        for fi in 0..F {
                            acc[fi] += tw[fi] * p;
                        }
                    }
                }
                for v in acc.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                orow[x_ * F..(x_ + 1) * F].copy_from_slice(&acc);
            }
        }
    }
}

#[inline(always)]
fn conv_c1_dyn(
    pv: &[f64],
    wv: &[f64],
    bv: &[f64],
    ov: &mut [f64],
    n: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    let wp = w + 2;
    let mut taps = vec![0.0f64; 9 * f];
    for tap in 0..9 {
        for fi in 0..f {
            taps[tap * f + fi] = wv[fi * 9 + tap];
        }
    }
    let mut acc = vec![0.0f64; f];
    for ni in 0..n {
        let pbase = ni * (h + 2) * wp;
        for y in 0..h {
            let rows = [
                &pv[pbase + y * wp..pbase + (y + 1) * wp],
                &pv[pbase + (y + 1) * wp..pbase + (y + 2) * wp],
                &pv[pbase + (y + 2) * wp..pbase + (y + 3) * wp],
            ];
            let orow = &mut ov[((ni * h + y) * w) * f..((ni * h + y + 1) * w) * f];
            for x_ in 0..w {
                acc.copy_from_slice(bv);
                for (dy, row) in rows.iter().enumerate() {
                    for dx in 0..3 {
                        let p = row[x_ + dx];
                        let tw = &taps[(dy * 3 + dx) * f..(dy * 3 + dx + 1) * f];
                        for (aa, ww) in acc.iter_mut().zip(tw) {
                            *aa += ww * p;
                        }
                    }
                }
                for v in acc.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                orow[x_ * f..(x_ + 1) * f].copy_from_slice(&acc);
            }
        }
    }
}

/// Weight/bias gradients of the single-channel stencil convolution.
/// `dout` is consumed (ReLU-gated in place); no input gradient is produced,
/// so this only serves the first block.
pub fn conv3x3_backward_c1(
    x: ArrayView4<f64>,
    out: &Array4<f64>,
    mut dout: Array4<f64>,
    f: usize,
) -> (Array2<f64>, Array1<f64>) {
    let (n, h, w, _) = dims(&x);
    ndarray::Zip::from(&mut dout).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    let padded = pad1(x);
    let pv = padded.as_slice().expect("standard layout");
    let dv = dout.as_slice().expect("standard layout");
    let mut acc = vec![0.0f64; 9 * f]; // [tap][filter]
    let mut bacc = vec![0.0f64; f];
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked above.
            unsafe { conv_c1_grad_kernel_avx2(pv, dv, &mut acc, &mut bacc, n, h, w, f) };
            return pack_c1_grads(&acc, &bacc, f);
        }
    }
    conv_c1_grad_kernel(pv, dv, &mut acc, &mut bacc, n, h, w, f);
    pack_c1_grads(&acc, &bacc, f)
}

fn pack_c1_grads(acc: &[f64], bacc: &[f64], f: usize) -> (Array2<f64>, Array1<f64>) {
    let mut dweight = Array2::zeros((f, 9));
    for tap in 0..9 {
        for fi in 0..f {
            dweight[(fi, tap)] = acc[tap * f + fi];
        }
    }
    (dweight, Array1::from_vec(bacc.to_vec()))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_c1_grad_kernel_avx2(
    pv: &[f64],
    dv: &[f64],
    acc: &mut [f64],
    bacc: &mut [f64],
    n: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    conv_c1_grad_kernel(pv, dv, acc, bacc, n, h, w, f);
}

#[inline(always)]
fn conv_c1_grad_kernel(
    pv: &[f64],
    dv: &[f64],
    acc: &mut [f64],
    bacc: &mut [f64],
    n: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    let wp = w + 2;
    for ni in 0..n {
        let pbase = ni * (h + 2) * wp;
        for y in 0..h {
            let rows = [
                &pv[pbase + y * wp..pbase + (y + 1) * wp],
                &pv[pbase + (y + 1) * wp..pbase + (y + 2) * wp],
                &pv[pbase + (y + 2) * wp..pbase + (y + 3) * wp],
            ];
            let drow = &dv[((ni * h + y) * w) * f..((ni * h + y + 1) * w) * f];
            // One pass per pixel: read its gradient lane once and feed all
            // nine tap accumulators (L1-resident).
            for x_ in 0..w {
                let d = &drow[x_ * f..(x_ + 1) * f];
                for (dy, row) in rows.iter().enumerate() {
                    for dx in 0..3 {
                        let p = row[x_ + dx];
                        let a = &mut acc[(dy * 3 + dx) * f..(dy * 3 + dx + 1) * f];
                        for (aa, dd) in a.iter_mut().zip(d) {
                            *aa += dd * p;
                        }
                    }
                }
                for (bb, dd) in bacc.iter_mut().zip(d) {
                    *bb += dd;
                }
            }
        }
    }
}

/// Gradients of [`conv3x3_forward`] given its post-ReLU output, its patch
/// matrix, and the upstream gradient `dout` (consumed; the ReLU gate is
/// applied in place). Returns `(d_weight, d_bias, d_input)`; the input
/// gradient is skipped when `need_dinput` is false (the first block has no
/// consumer for it).
pub fn conv3x3_backward(
    weight: &Array2<f64>,
    out: &Array4<f64>,
    cols: &Array2<f64>,
    mut dout: Array4<f64>,
    need_dinput: bool,
) -> (Array2<f64>, Array1<f64>, Option<Array4<f64>>) {
    let (n, h, w, _f) = dims(&out.view());
    let f = weight.shape()[0];
    let c = weight.shape()[1] / 9;
    // ReLU gate.
    ndarray::Zip::from(&mut dout).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    let rows = n * h * w;
    let dout2d =
        ArrayView2::from_shape((rows, f), dout.as_slice().expect("standard layout")).unwrap();
    let dweight = dout2d.t().dot(cols);
    let dbias = dout2d.sum_axis(ndarray::Axis(0));
    let dinput = need_dinput.then(|| {
        let dcols = dout2d.dot(weight);
        col2im3x3(dcols.view(), n, h, w, c)
    });
    (dweight, dbias, dinput)
}

/// 2x2 max pooling with stride 2 (floor semantics on odd sizes).
///
/// Returns the pooled map and, per pooled cell, the flat `(y*W + x)*C + c`
/// index of the winning input cell within its sample; ties go to the first
/// candidate in `(dy, dx)` scan order.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (n, h, w, c) = dims(&x.view());
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, ho, wo, c));
    let ov = out.as_slice_mut().expect("standard layout");
    let mut idx = vec![0u32; n * ho * wo * c];
    for ni in 0..n {
        let sbase = ni * h * w * c;
        let obase = ni * ho * wo * c;
        for yo in 0..ho {
            for xo in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let y = yo * 2 + dy;
                            let x_ = xo * 2 + dx;
                            let flat = (y * w + x_) * c + ch;
                            let v = xs[sbase + flat];
                            if v > best {
                                best = v;
                                best_at = flat as u32;
                            }
                        }
                    }
                    let o = obase + (yo * wo + xo) * c + ch;
                    ov[o] = best;
                    idx[o] = best_at;
                }
            }
        }
    }
    (out, idx)
}

/// Scatter pooled gradients back to the winning input cells.
pub fn maxpool2_backward(dout: &Array4<f64>, idx: &[u32], h: usize, w: usize) -> Array4<f64> {
    let (n, ho, wo, c) = dims(&dout.view());
    let dv = dout.as_slice().expect("standard layout");
    let mut dx = Array4::zeros((n, h, w, c));
    let xv = dx.as_slice_mut().expect("standard layout");
    let per_sample = h * w * c;
    for ni in 0..n {
        let obase = ni * ho * wo * c;
        let sbase = ni * per_sample;
        for k in 0..ho * wo * c {
            xv[sbase + idx[obase + k] as usize] += dv[obase + k];
        }
    }
    dx
}

fn dims(x: &ArrayView4<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array4};

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::Rng;
        let mut rng = crate::rng::RngState::new(1).stream("adj").rng();
        let (n, h, w, c) = (2, 4, 3, 2);
        let mut x = Array4::zeros((n, h, w, c));
        for v in x.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let cols = im2col3x3(&pad1(x.view()), h, w);
        let mut y = Array2::zeros(cols.raw_dim());
        for v in y.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im3x3(y.view(), n, h, w, c);
        let rhs: f64 = (&x * &back).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        // Weight that picks the center tap of channel 0.
        let x = array![[
            [[1.0], [2.0], [3.0]],
            [[4.0], [5.0], [6.0]],
            [[7.0], [8.0], [9.0]]
        ]];
        let mut w = Array2::zeros((1, 9));
        w[(0, 4)] = 1.0; // dy=1, dx=1
        let b = Array1::zeros(1);
        let (out, _) = conv3x3_forward(x.view(), &w, &b);
        assert_eq!(out, x);
    }

    #[test]
    fn maxpool_picks_maxima_and_routes_gradient() {
        let x = array![[
            [[1.0], [5.0], [2.0], [0.0]],
            [[3.0], [4.0], [1.0], [7.0]],
            [[0.5], [0.1], [0.2], [0.3]],
            [[0.6], [0.9], [0.4], [0.8]]
        ]];
        let (out, idx) = maxpool2(&x);
        assert_eq!(out.shape(), &[1, 2, 2, 1]);
        assert_eq!(out[(0, 0, 0, 0)], 5.0);
        assert_eq!(out[(0, 0, 1, 0)], 7.0);
        assert_eq!(out[(0, 1, 0, 0)], 0.9);
        assert_eq!(out[(0, 1, 1, 0)], 0.8);
        let mut dout = Array4::zeros((1, 2, 2, 1));
        dout.fill(1.0);
        let dx = maxpool2_backward(&dout, &idx, 4, 4);
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[(0, 0, 1, 0)], 1.0); // 5.0 won
        assert_eq!(dx[(0, 1, 3, 0)], 1.0); // 7.0 won
    }

    #[test]
    fn odd_sizes_floor() {
        let x = Array4::from_elem((1, 5, 7, 2), 1.0);
        let (out, idx) = maxpool2(&x);
        assert_eq!(out.shape(), &[1, 2, 3, 2]);
        assert_eq!(idx.len(), 2 * 3 * 2);
    }
}
