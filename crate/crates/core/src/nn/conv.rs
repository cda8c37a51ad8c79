//! Convolution kernels (1D, transposed 1D, 2D) and their graph wrappers.
//!
//! Layouts follow the usual deep-learning conventions:
//! `x: (batch, channels, frames)`, conv weight `(out, in/groups, kernel)`,
//! transposed-conv weight `(in, out, kernel)`, 2D input `(batch, channels,
//! height, width)` with weight `(out, in, kh, kw)`.

use rayon::prelude::*;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Placement of a 1D convolution window relative to its input.
///
/// Negative padding skips input frames at that edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: isize,
    pub pad_right: isize,
    pub groups: usize,
}

impl Conv1dGeometry {
    pub fn same(kernel: usize) -> Self {
        let p = ((kernel - 1) / 2) as isize;
        Self {
            stride: 1,
            dilation: 1,
            pad_left: p,
            pad_right: p,
            groups: 1,
        }
    }

    pub fn output_len(&self, frames: usize, kernel: usize) -> usize {
        let span = (self.dilation * (kernel - 1) + 1) as isize;
        let padded = frames as isize + self.pad_left + self.pad_right;
        if padded < span {
            0
        } else {
            ((padded - span) / self.stride as isize + 1) as usize
        }
    }

    /// Output frames `[lo, hi)` whose tap `offset` lands inside the input.
    fn valid_range(&self, tap: usize, frames: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = (tap * self.dilation) as isize - self.pad_left;
        // need 0 <= t*s + shift < frames
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (frames as isize - shift + s - 1).div_euclid(s);
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    fn input_index(&self, t: usize, tap: usize) -> usize {
        (t as isize * self.stride as isize + (tap * self.dilation) as isize - self.pad_left) as usize
    }
}

pub fn conv1d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geo: &Conv1dGeometry) -> Tensor {
    let (batch, cin, frames) = x.dims3();
    let (cout, cin_g, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(cin_g * geo.groups, cin, "conv1d input channels");
    let cout_g = cout / geo.groups;
    let lout = geo.output_len(frames, kernel);
    let mut out = vec![0.0; batch * cout * lout];
    if lout == 0 {
        return Tensor::new(&[batch, cout, 0], out);
    }
    let ranges: Vec<(usize, usize)> = (0..kernel)
        .map(|k| geo.valid_range(k, frames, lout))
        .collect();
    if geo.groups == 1 {
        let patch = cin * kernel;
        out.par_chunks_mut(cout * lout).enumerate().for_each(|(b, y)| {
            if let Some(bias) = bias {
                for (o, yo) in y.chunks_mut(lout).enumerate() {
                    yo.fill(bias.data()[o]);
                }
            }
            let xb = &x.data()[b * cin * frames..(b + 1) * cin * frames];
            if is_pointwise(geo, kernel, frames, lout) {
                gemm(cout, patch, lout, w.data(), false, xb, false, 1.0, y);
            } else {
                with_scratch(patch * lout, |col| {
                    im2col_1d(xb, cin, frames, kernel, lout, geo, &ranges, col);
                    gemm(cout, patch, lout, w.data(), false, col, false, 1.0, y);
                });
            }
        });
        return Tensor::new(&[batch, cout, lout], out);
    }
    out.par_chunks_mut(lout).enumerate().for_each(|(bo, row)| {
        let (b, o) = (bo / cout, bo % cout);
        if let Some(bias) = bias {
            row.fill(bias.data()[o]);
        }
        let group = o / cout_g;
        for c in 0..cin_g {
            let ic = group * cin_g + c;
            let xs = &x.data()[(b * cin + ic) * frames..(b * cin + ic + 1) * frames];
            for (k, &(lo, hi)) in ranges.iter().enumerate() {
                if lo >= hi {
                    continue;
                }
                let wv = w.data()[(o * cin_g + c) * kernel + k];
                if geo.stride == 1 {
                    let start = geo.input_index(lo, k);
                    for (y, xv) in row[lo..hi].iter_mut().zip(&xs[start..start + hi - lo]) {
                        *y += wv * xv;
                    }
                } else {
                    for (t, y) in row.iter_mut().enumerate().take(hi).skip(lo) {
                        *y += wv * xs[geo.input_index(t, k)];
                    }
                }
            }
        }
    });
    Tensor::new(&[batch, cout, lout], out)
}

/// Gradients `(dx, dw, dbias)` of [`conv1d_forward`].
pub fn conv1d_backward(
    gy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    geo: &Conv1dGeometry,
) -> (Tensor, Tensor, Tensor) {
    let (batch, cin, frames) = x.dims3();
    let (cout, cin_g, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let cout_g = cout / geo.groups;
    let lout = gy.shape()[2];
    let ranges: Vec<(usize, usize)> = (0..kernel)
        .map(|k| geo.valid_range(k, frames, lout))
        .collect();
    let db = bias_grad(gy, batch, cout, lout);

    if geo.groups == 1 {
        let patch = cin * kernel;
        let mut dx = vec![0.0; batch * cin * frames];
        let mut dw = vec![0.0; cout * patch];
        let pointwise = is_pointwise(geo, kernel, frames, lout);
        with_scratch(patch * lout, |col| {
            for b in 0..batch {
                let gs = &gy.data()[b * cout * lout..(b + 1) * cout * lout];
                let xb = &x.data()[b * cin * frames..(b + 1) * cin * frames];
                let dxb = &mut dx[b * cin * frames..(b + 1) * cin * frames];
                if pointwise {
                    gemm(cout, lout, patch, gs, false, xb, true, 1.0, &mut dw);
                    gemm(patch, cout, lout, w.data(), true, gs, false, 0.0, dxb);
                } else {
                    im2col_1d(xb, cin, frames, kernel, lout, geo, &ranges, col);
                    gemm(cout, lout, patch, gs, false, col, true, 1.0, &mut dw);
                    gemm(patch, cout, lout, w.data(), true, gs, false, 0.0, col);
                    col2im_1d(col, cin, frames, kernel, lout, geo, &ranges, dxb);
                }
            }
        });
        return (
            Tensor::new(x.shape(), dx),
            Tensor::new(w.shape(), dw),
            Tensor::new(&[cout], db),
        );
    }

    let mut dx = vec![0.0; batch * cin * frames];
    dx.par_chunks_mut(frames).enumerate().for_each(|(bc, row)| {
        let (b, ic) = (bc / cin, bc % cin);
        let group = ic / cin_g;
        let c = ic % cin_g;
        for o in group * cout_g..(group + 1) * cout_g {
            let gs = &gy.data()[(b * cout + o) * lout..(b * cout + o + 1) * lout];
            for (k, &(lo, hi)) in ranges.iter().enumerate() {
                if lo >= hi {
                    continue;
                }
                let wv = w.data()[(o * cin_g + c) * kernel + k];
                if geo.stride == 1 {
                    let start = geo.input_index(lo, k);
                    for (d, g) in row[start..start + hi - lo].iter_mut().zip(&gs[lo..hi]) {
                        *d += wv * g;
                    }
                } else {
                    for (t, g) in gs.iter().enumerate().take(hi).skip(lo) {
                        row[geo.input_index(t, k)] += wv * g;
                    }
                }
            }
        }
    });

    let mut dw = vec![0.0; cout * cin_g * kernel];
    dw.par_chunks_mut(cin_g * kernel)
        .enumerate()
        .for_each(|(o, wrow)| {
            let group = o / cout_g;
            for b in 0..batch {
                let gs = &gy.data()[(b * cout + o) * lout..(b * cout + o + 1) * lout];
                for c in 0..cin_g {
                    let ic = group * cin_g + c;
                    let xs = &x.data()[(b * cin + ic) * frames..(b * cin + ic + 1) * frames];
                    for (k, &(lo, hi)) in ranges.iter().enumerate() {
                        let mut acc = 0.0;
                        for (t, g) in gs.iter().enumerate().take(hi).skip(lo) {
                            acc += g * xs[geo.input_index(t, k)];
                        }
                        wrow[c * kernel + k] += acc;
                    }
                }
            }
        });

    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        Tensor::new(&[cout], db),
    )
}

fn bias_grad(gy: &Tensor, batch: usize, cout: usize, lout: usize) -> Vec<f64> {
    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for (o, d) in db.iter_mut().enumerate() {
            *d += gy.data()[(b * cout + o) * lout..(b * cout + o + 1) * lout]
                .iter()
                .sum::<f64>();
        }
    }
    db
}

/// Kernel-1, stride-1, unpadded: the input is its own patch matrix.
fn is_pointwise(geo: &Conv1dGeometry, kernel: usize, frames: usize, lout: usize) -> bool {
    kernel == 1 && geo.stride == 1 && geo.pad_left == 0 && lout == frames
}

/// Patch matrix `[cin·kernel, lout]` of one batch item.
#[allow(clippy::too_many_arguments)]
fn im2col_1d(
    xs: &[f64],
    cin: usize,
    frames: usize,
    kernel: usize,
    lout: usize,
    geo: &Conv1dGeometry,
    ranges: &[(usize, usize)],
    col: &mut [f64],
) {
    for c in 0..cin {
        let xc = &xs[c * frames..(c + 1) * frames];
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            let dst = &mut col[(c * kernel + k) * lout..][..lout];
            dst[..lo].fill(0.0);
            dst[hi..].fill(0.0);
            if lo == hi {
                continue;
            }
            if geo.stride == 1 {
                let start = geo.input_index(lo, k);
                dst[lo..hi].copy_from_slice(&xc[start..start + hi - lo]);
            } else {
                for t in lo..hi {
                    dst[t] = xc[geo.input_index(t, k)];
                }
            }
        }
    }
}

/// Adjoint of [`im2col_1d`], accumulating into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_1d(
    col: &[f64],
    cin: usize,
    frames: usize,
    kernel: usize,
    lout: usize,
    geo: &Conv1dGeometry,
    ranges: &[(usize, usize)],
    dx: &mut [f64],
) {
    for c in 0..cin {
        let dc = &mut dx[c * frames..(c + 1) * frames];
        for (k, &(lo, hi)) in ranges.iter().enumerate() {
            let src = &col[(c * kernel + k) * lout..][..lout];
            for t in lo..hi {
                dc[geo.input_index(t, k)] += src[t];
            }
        }
    }
}

/// Transposed convolution with `trim_left`/`trim_right` frames discarded
/// from the full `(T−1)·stride + kernel` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose1dGeometry {
    pub stride: usize,
    pub trim_left: usize,
    pub trim_right: usize,
}

impl ConvTranspose1dGeometry {
    pub fn output_len(&self, frames: usize, kernel: usize) -> usize {
        let full = if frames == 0 {
            0
        } else {
            (frames - 1) * self.stride + kernel
        };
        full.saturating_sub(self.trim_left + self.trim_right)
    }
}

pub fn conv_transpose1d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geo: &ConvTranspose1dGeometry,
) -> Tensor {
    let (batch, cin, frames) = x.dims3();
    let (wcin, cout, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(wcin, cin, "conv_transpose1d input channels");
    let lout = geo.output_len(frames, kernel);
    let mut out = vec![0.0; batch * cout * lout];
    out.par_chunks_mut(lout.max(1))
        .take(batch * cout)
        .enumerate()
        .for_each(|(bo, row)| {
            if lout == 0 {
                return;
            }
            let (b, o) = (bo / cout, bo % cout);
            if let Some(bias) = bias {
                row.fill(bias.data()[o]);
            }
            for c in 0..cin {
                let xs = &x.data()[(b * cin + c) * frames..(b * cin + c + 1) * frames];
                for k in 0..kernel {
                    let wv = w.data()[(c * cout + o) * kernel + k];
                    for (i, xv) in xs.iter().enumerate() {
                        let j = (i * geo.stride + k) as isize - geo.trim_left as isize;
                        if j >= 0 && (j as usize) < lout {
                            row[j as usize] += wv * xv;
                        }
                    }
                }
            }
        });
    Tensor::new(&[batch, cout, lout], out)
}

pub fn conv_transpose1d_backward(
    gy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    geo: &ConvTranspose1dGeometry,
) -> (Tensor, Tensor, Tensor) {
    let (batch, cin, frames) = x.dims3();
    let (_, cout, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let lout = gy.shape()[2];
    let target = |i: usize, k: usize| -> Option<usize> {
        let j = (i * geo.stride + k) as isize - geo.trim_left as isize;
        (j >= 0 && (j as usize) < lout).then_some(j as usize)
    };

    let mut dx = vec![0.0; batch * cin * frames];
    dx.par_chunks_mut(frames.max(1))
        .take(batch * cin)
        .enumerate()
        .for_each(|(bc, row)| {
            let (b, c) = (bc / cin, bc % cin);
            for o in 0..cout {
                let gs = &gy.data()[(b * cout + o) * lout..(b * cout + o + 1) * lout];
                for k in 0..kernel {
                    let wv = w.data()[(c * cout + o) * kernel + k];
                    for (i, d) in row.iter_mut().enumerate() {
                        if let Some(j) = target(i, k) {
                            *d += wv * gs[j];
                        }
                    }
                }
            }
        });

    let mut dw = vec![0.0; cin * cout * kernel];
    dw.par_chunks_mut(cout * kernel)
        .enumerate()
        .for_each(|(c, wrow)| {
            for b in 0..batch {
                let xs = &x.data()[(b * cin + c) * frames..(b * cin + c + 1) * frames];
                for o in 0..cout {
                    let gs = &gy.data()[(b * cout + o) * lout..(b * cout + o + 1) * lout];
                    for k in 0..kernel {
                        let mut acc = 0.0;
                        for (i, xv) in xs.iter().enumerate() {
                            if let Some(j) = target(i, k) {
                                acc += xv * gs[j];
                            }
                        }
                        wrow[o * kernel + k] += acc;
                    }
                }
            }
        });

    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for (o, d) in db.iter_mut().enumerate() {
            *d += gy.data()[(b * cout + o) * lout..(b * cout + o + 1) * lout]
                .iter()
                .sum::<f64>();
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        Tensor::new(&[cout], db),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    fn out_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let f = |n: usize, k: usize, s: usize, p: usize| {
            if n + 2 * p < k {
                0
            } else {
                (n + 2 * p - k) / s + 1
            }
        };
        (
            f(h, kh, self.stride.0, self.padding.0),
            f(w, kw, self.stride.1, self.padding.1),
        )
    }
}

/// Output positions `o < n_out` whose source `o * s + k - p` lies in `0..n`.
fn valid_range(k: usize, s: usize, p: usize, n: usize, n_out: usize) -> std::ops::Range<usize> {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(n_out) } else { 0 };
    lo.min(hi)..hi
}

/// Row-major `c = alpha·op(a)·op(b) + beta·c` with `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices cover the strided extents described above.
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

struct Conv2dDims {
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Run `f` on a reused per-thread buffer of length `n`. Contents are stale;
/// callers overwrite every element they read.
fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < n {
            buf.resize(n, 0.0);
        }
        f(&mut buf[..n])
    })
}

/// Patch matrix `[cin·kh·kw, ho·wo]` of one batch item.
fn im2col(xs: &[f64], d: &Conv2dDims, geo: &Conv2dGeometry, col: &mut [f64]) {
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let plane = d.ho * d.wo;
    for c in 0..d.cin {
        let xc = &xs[c * d.h * d.wd..(c + 1) * d.h * d.wd];
        for a in 0..d.kh {
            let rows = valid_range(a, sh, ph, d.h, d.ho);
            for e in 0..d.kw {
                let cols = valid_range(e, sw, pw, d.wd, d.wo);
                let dst = &mut col[((c * d.kh + a) * d.kw + e) * plane..][..plane];
                dst[..rows.start * d.wo].fill(0.0);
                dst[rows.end * d.wo..].fill(0.0);
                for oh in rows.clone() {
                    dst[oh * d.wo..oh * d.wo + cols.start].fill(0.0);
                    dst[oh * d.wo + cols.end..(oh + 1) * d.wo].fill(0.0);
                    if cols.is_empty() {
                        continue;
                    }
                    let ih = oh * sh + a - ph;
                    let base = ih * d.wd + cols.start * sw + e - pw;
                    let row = &mut dst[oh * d.wo + cols.start..oh * d.wo + cols.end];
                    if sw == 1 {
                        row.copy_from_slice(&xc[base..base + cols.len()]);
                    } else {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = xc[base + j * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im(col: &[f64], d: &Conv2dDims, geo: &Conv2dGeometry, dx: &mut [f64]) {
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let plane = d.ho * d.wo;
    for c in 0..d.cin {
        let dc = &mut dx[c * d.h * d.wd..(c + 1) * d.h * d.wd];
        for a in 0..d.kh {
            let rows = valid_range(a, sh, ph, d.h, d.ho);
            for e in 0..d.kw {
                let cols = valid_range(e, sw, pw, d.wd, d.wo);
                if cols.is_empty() {
                    continue;
                }
                let src = &col[((c * d.kh + a) * d.kw + e) * plane..][..plane];
                for oh in rows.clone() {
                    let ih = oh * sh + a - ph;
                    let base = ih * d.wd + cols.start * sw + e - pw;
                    let row = &src[oh * d.wo + cols.start..oh * d.wo + cols.end];
                    if sw == 1 {
                        for (t, v) in dc[base..base + cols.len()].iter_mut().zip(row) {
                            *t += v;
                        }
                    } else {
                        for (j, v) in row.iter().enumerate() {
                            dc[base + j * sw] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_dims(x: &Tensor, w: &Tensor, geo: &Conv2dGeometry) -> (usize, usize, Conv2dDims) {
    let s = x.shape();
    let (batch, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(wcin, cin, "conv2d input channels");
    let (ho, wo) = geo.out_dims(h, wd, kh, kw);
    (batch, cout, Conv2dDims { cin, h, wd, kh, kw, ho, wo })
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geo: &Conv2dGeometry) -> Tensor {
    let (batch, cout, d) = conv2d_dims(x, w, geo);
    let plane = d.ho * d.wo;
    let patch = d.cin * d.kh * d.kw;
    let mut out = vec![0.0; batch * cout * plane];
    if plane > 0 {
        out.par_chunks_mut(cout * plane).enumerate().for_each(|(b, y)| {
            with_scratch(patch * plane, |col| {
                im2col(&x.data()[b * d.cin * d.h * d.wd..(b + 1) * d.cin * d.h * d.wd], &d, geo, col);
                if let Some(bias) = bias {
                    for (o, yo) in y.chunks_mut(plane).enumerate() {
                        yo.fill(bias.data()[o]);
                    }
                }
                gemm(cout, patch, plane, w.data(), false, col, false, 1.0, y);
            });
        });
    }
    Tensor::new(&[batch, cout, d.ho, d.wo], out)
}

/// Gradients `(dx, dw, db)`; `dx` and `dw` are skipped (returned as `None`)
/// when not requested.
pub fn conv2d_backward(
    gy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    geo: &Conv2dGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (batch, cout, d) = conv2d_dims(x, w, geo);
    let plane = d.ho * d.wo;
    let patch = d.cin * d.kh * d.kw;
    let item = d.cin * d.h * d.wd;

    let mut dx = vec![0.0; if need_dx { batch * item } else { 0 }];
    let mut dw = vec![0.0; cout * patch];
    with_scratch(patch * plane, |col| {
        for b in 0..batch {
            let gs = &gy.data()[b * cout * plane..(b + 1) * cout * plane];
            if need_dw {
                im2col(&x.data()[b * item..(b + 1) * item], &d, geo, col);
                gemm(cout, plane, patch, gs, false, col, true, 1.0, &mut dw);
            }
            if need_dx {
                gemm(patch, cout, plane, w.data(), true, gs, false, 0.0, col);
                col2im(col, &d, geo, &mut dx[b * item..(b + 1) * item]);
            }
        }
    });

    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for (o, v) in db.iter_mut().enumerate() {
            *v += gy.data()[(b * cout + o) * plane..(b * cout + o + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape(), dx)),
        need_dw.then(|| Tensor::new(w.shape(), dw)),
        Tensor::new(&[cout], db),
    )
}

impl Graph {
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: Conv1dGeometry) -> Var {
        let value = conv1d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geo,
        );
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.op(&parents, value, move |g, inputs, _| {
            let (dx, dw, db) = conv1d_backward(g, inputs[0], inputs[1], &geo);
            let mut out = vec![Some(dx), Some(dw)];
            if inputs.len() == 3 {
                out.push(Some(db));
            }
            out
        })
    }

    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geo: ConvTranspose1dGeometry,
    ) -> Var {
        let value = conv_transpose1d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geo,
        );
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.op(&parents, value, move |g, inputs, _| {
            let (dx, dw, db) = conv_transpose1d_backward(g, inputs[0], inputs[1], &geo);
            let mut out = vec![Some(dx), Some(dw)];
            if inputs.len() == 3 {
                out.push(Some(db));
            }
            out
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: Conv2dGeometry) -> Var {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geo,
        );
        let (need_dx, need_dw) = (self.requires_grad(x), self.requires_grad(w));
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.op(&parents, value, move |g, inputs, _| {
            let (dx, dw, db) = conv2d_backward(g, inputs[0], inputs[1], &geo, need_dx, need_dw);
            let mut out = vec![dx, dw];
            if inputs.len() == 3 {
                out.push(Some(db));
            }
            out
        })
    }
}
