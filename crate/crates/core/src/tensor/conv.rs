//! Convolution kernels lowered to GEMM through patch matrices.
//!
//! `conv2d` is a cross-correlation with zero padding. `conv_transpose2d` is
//! implemented as the exact adjoint of `conv2d` taken from the (larger) output
//! space, so its forward pass is the input-gradient of a strided convolution.

use rayon::prelude::*;

use super::gemm::sgemm;
use crate::error::{Error, Result};

/// Stride/padding description shared by both convolution directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    /// Only meaningful for the transposed direction.
    pub output_padding: usize,
}

impl ConvSpec {
    pub const fn same() -> Self {
        Self {
            stride: 1,
            padding: 1,
            output_padding: 0,
        }
    }

    pub const fn down() -> Self {
        Self {
            stride: 2,
            padding: 1,
            output_padding: 0,
        }
    }

    pub const fn up() -> Self {
        Self {
            stride: 2,
            padding: 1,
            output_padding: 1,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            stride: 1,
            padding: 0,
            output_padding: 0,
        }
    }
}

/// Spatial output dims of a forward convolution.
pub fn conv_output_dims(h: usize, w: usize, k: usize, spec: ConvSpec) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
    if hp < k || wp < k || spec.stride == 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} input too small for {k}x{k} kernel with padding {}",
            spec.padding
        )));
    }
    Ok(((hp - k) / spec.stride + 1, (wp - k) / spec.stride + 1))
}

/// Geometry of one strided correlation from an `h x w` image to `oh x ow`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.ch * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Patch matrix `[ch·k·k, oh·ow]` of one image `[ch, h, w]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.cols();
        let (h, w, s, pad) = (self.h as isize, self.w as isize, self.stride as isize, self.pad as isize);
        for c in 0..self.ch {
            let img = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ki as isize - pad;
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= h {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &img[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if s == 1 {
                            // contiguous valid span for unit stride
                            let lo = (pad - kj as isize).max(0) as usize;
                            let hi = ((w + pad - kj as isize).min(self.ow as isize)).max(lo as isize) as usize;
                            out[..lo].fill(0.0);
                            let start = (lo as isize + kj as isize - pad) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            out[hi..].fill(0.0);
                        } else {
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = ox as isize * s + kj as isize - pad;
                                *o = if ix >= 0 && ix < w { src[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: scatter-add patches back into `x`.
    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let p = self.cols();
        let (h, w, s, pad) = (self.h as isize, self.w as isize, self.stride as isize, self.pad as isize);
        for c in 0..self.ch {
            let img = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut img[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let inp = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, &v) in inp.iter().enumerate() {
                            let ix = ox as isize * s + kj as isize - pad;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Shapes of a forward convolution `x[n, cin, h, w] * w[cout, cin, k, k]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: Geom,
}

impl ConvShape {
    pub fn forward(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let (n, cin, h, wd) = dims4(x)?;
        let (cout, wcin, kh, kw) = dims4(w)?;
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!("conv weight {w:?} incompatible with input {x:?}")));
        }
        if spec.stride > 1 && (h % spec.stride != 0 || wd % spec.stride != 0) {
            return Err(Error::Shape(format!(
                "{h}x{wd} input not divisible by stride {}",
                spec.stride
            )));
        }
        let (oh, ow) = conv_output_dims(h, wd, kh, spec)?;
        Ok(Self {
            n,
            cin,
            cout,
            geom: Geom {
                ch: cin,
                h,
                w: wd,
                k: kh,
                stride: spec.stride,
                pad: spec.padding,
                oh,
                ow,
            },
        })
    }

    /// Transposed convolution `x[n, cin, h, w]` with weight `[cin, cout, k, k]`.
    /// The returned geometry describes the adjoint forward correlation from the
    /// output image (`cout` channels) down to `h x w`.
    pub fn transposed(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let (n, cin, h, wd) = dims4(x)?;
        let (wcin, cout, kh, kw) = dims4(w)?;
        if wcin != cin || kh != kw {
            return Err(Error::Shape(format!(
                "transposed conv weight {w:?} incompatible with input {x:?}"
            )));
        }
        let grow = |d: usize| (d - 1) * spec.stride + kh + spec.output_padding;
        let (out_h, out_w) = (grow(h) as isize - 2 * spec.padding as isize, grow(wd) as isize - 2 * spec.padding as isize);
        if out_h <= 0 || out_w <= 0 {
            return Err(Error::Shape("transposed conv output collapses".into()));
        }
        let (out_h, out_w) = (out_h as usize, out_w as usize);
        let inner = ConvSpec {
            stride: spec.stride,
            padding: spec.padding,
            output_padding: 0,
        };
        let (oh, ow) = conv_output_dims(out_h, out_w, kh, inner)?;
        if (oh, ow) != (h, wd) {
            return Err(Error::Shape(format!(
                "output padding {} does not make the transpose an exact adjoint ({oh}x{ow} vs {h}x{wd})",
                spec.output_padding
            )));
        }
        Ok(Self {
            n,
            cin,
            cout,
            geom: Geom {
                ch: cout,
                h: out_h,
                w: out_w,
                k: kh,
                stride: spec.stride,
                pad: spec.padding,
                oh: h,
                ow: wd,
            },
        })
    }
}

fn dims4(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Shape(format!("expected rank-4 shape, got {s:?}"))),
    }
}

/// Forward correlation. Returns `[n, cout, oh, ow]` data.
pub(crate) fn conv_forward(s: &ConvShape, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let g = s.geom;
    let (k_rows, p) = (g.rows(), g.cols());
    let in_stride = s.cin * g.h * g.w;
    let mut out = vec![0.0f32; s.n * s.cout * p];
    out.par_chunks_mut(s.cout * p).enumerate().for_each(|(i, o)| {
        let xi = &x[i * in_stride..(i + 1) * in_stride];
        for (co, row) in o.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
        if g.is_identity() {
            sgemm(s.cout, k_rows, p, w, false, xi, false, 1.0, o);
        } else {
            let mut cols = vec![0.0f32; k_rows * p];
            g.im2col(xi, &mut cols);
            sgemm(s.cout, k_rows, p, w, false, &cols, false, 1.0, o);
        }
    });
    out
}

/// Gradients of the forward correlation. `dx` is skipped when not needed.
pub(crate) fn conv_backward(
    s: &ConvShape,
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let g = s.geom;
    let (k_rows, p) = (g.rows(), g.cols());
    let in_stride = s.cin * g.h * g.w;
    let out_stride = s.cout * p;

    let db = bias_grad(dout, s.n, s.cout, p);

    let partial: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * in_stride..(i + 1) * in_stride];
            let di = &dout[i * out_stride..(i + 1) * out_stride];
            let mut dw = vec![0.0f32; s.cout * k_rows];
            let dx = if g.is_identity() {
                sgemm(s.cout, p, k_rows, di, false, xi, true, 0.0, &mut dw);
                need_dx.then(|| {
                    let mut dx = vec![0.0f32; in_stride];
                    sgemm(k_rows, s.cout, p, w, true, di, false, 0.0, &mut dx);
                    dx
                })
            } else {
                let mut cols = vec![0.0f32; k_rows * p];
                g.im2col(xi, &mut cols);
                sgemm(s.cout, p, k_rows, di, false, &cols, true, 0.0, &mut dw);
                need_dx.then(|| {
                    sgemm(k_rows, s.cout, p, w, true, di, false, 0.0, &mut cols);
                    let mut dx = vec![0.0f32; in_stride];
                    g.col2im(&cols, &mut dx);
                    dx
                })
            };
            (dw, dx)
        })
        .collect();

    let mut dw = vec![0.0f32; s.cout * k_rows];
    let mut dx = need_dx.then(|| Vec::with_capacity(s.n * in_stride));
    for (pdw, pdx) in partial {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend_from_slice(&pdx);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution forward. `x` is `[n, cin, h, w]`, weights
/// `[cin, cout, k, k]`, output `[n, cout, H, W]` with `H x W` the geometry's
/// image size.
pub(crate) fn conv_transpose_forward(s: &ConvShape, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let g = s.geom;
    let (k_rows, p) = (g.rows(), g.cols());
    let in_stride = s.cin * p;
    let out_plane = g.h * g.w;
    let mut out = vec![0.0f32; s.n * s.cout * out_plane];
    out.par_chunks_mut(s.cout * out_plane).enumerate().for_each(|(i, o)| {
        let xi = &x[i * in_stride..(i + 1) * in_stride];
        let mut cols = vec![0.0f32; k_rows * p];
        // cols = Wᵀ · x with W viewed as [cin, cout·k·k]
        sgemm(k_rows, s.cin, p, w, true, xi, false, 0.0, &mut cols);
        g.col2im(&cols, o);
        for (co, plane) in o.chunks_mut(out_plane).enumerate() {
            for v in plane {
                *v += b[co];
            }
        }
    });
    out
}

pub(crate) fn conv_transpose_backward(
    s: &ConvShape,
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let g = s.geom;
    let (k_rows, p) = (g.rows(), g.cols());
    let in_stride = s.cin * p;
    let out_plane = g.h * g.w;
    let out_stride = s.cout * out_plane;

    let db = bias_grad(dout, s.n, s.cout, out_plane);

    let partial: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * in_stride..(i + 1) * in_stride];
            let di = &dout[i * out_stride..(i + 1) * out_stride];
            let mut cols = vec![0.0f32; k_rows * p];
            g.im2col(di, &mut cols);
            let mut dw = vec![0.0f32; s.cin * k_rows];
            sgemm(s.cin, p, k_rows, xi, false, &cols, true, 0.0, &mut dw);
            let dx = need_dx.then(|| {
                let mut dx = vec![0.0f32; in_stride];
                sgemm(s.cin, k_rows, p, w, false, &cols, false, 0.0, &mut dx);
                dx
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![0.0f32; s.cin * k_rows];
    let mut dx = need_dx.then(|| Vec::with_capacity(s.n * in_stride));
    for (pdw, pdx) in partial {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            dx.extend_from_slice(&pdx);
        }
    }
    (dx, dw, db)
}

fn bias_grad(dout: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut db = vec![0.0f64; c];
    for i in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let start = (i * c + co) * plane;
            *acc += dout[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    db.into_iter().map(|v| v as f32).collect()
}
