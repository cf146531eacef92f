//! Dense convolution, fixed-kernel Laplacian and 2x upsampling.

use crate::diff::graph::{Graph, Var};
use crate::diff::real::{gemm, Layout, Real};
use crate::diff::tensor::{chw, nchw, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let x0 = lo * g.stride + kx - g.pad;
                    for (j, &v) in s.iter().enumerate() {
                        line[x0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Separable source taps for half-pixel 2x bilinear upsampling with edge clamping.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Replicate-padded neighbour index along one axis.
#[inline]
fn nb(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

fn laplacian_plane<T: Real>(x: &[T], h: usize, w: usize, out: &mut [T]) {
    let four = T::of(4.0);
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] =
                x[nb(i, -1, h) * w + j] + x[nb(i, 1, h) * w + j] + x[i * w + nb(j, -1, w)] + x[i * w + nb(j, 1, w)]
                    - four * x[i * w + j];
        }
    }
}

/// Adjoint of [`laplacian_plane`], accumulated into `gx`.
fn laplacian_plane_adjoint<T: Real>(g: &[T], h: usize, w: usize, gx: &mut [T]) {
    let four = T::of(4.0);
    for i in 0..h {
        for j in 0..w {
            let v = g[i * w + j];
            gx[i * w + j] -= four * v;
            gx[nb(i, -1, h) * w + j] += v;
            gx[nb(i, 1, h) * w + j] += v;
            gx[i * w + nb(j, -1, w)] += v;
            gx[i * w + nb(j, 1, w)] += v;
        }
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `[N,C,H,W]` (or `[C,H,W]`) input with `[O,C,kh,kw]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c, h, w) = nchw("conv2d", &in_shape)?;
        let (o, kc, kh, kw) = match *self.shape(weight) {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            ref s => return Err(Error::shape("conv2d", format!("weight must be [O,C,kh,kw], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape("conv2d", format!("input channels {c} do not match weight channels {kc}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != o {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} entries for {o} output channels", self.value(b).numel()),
                ));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let ckk = c * kh * kw;
        let hw_out = geom.ho * geom.wo;
        let mut out = vec![T::zero(); n * o * hw_out];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
        {
            let xs = self.data(input);
            let ws = self.data(weight);
            for ni in 0..n {
                let x = &xs[ni * c * h * w..(ni + 1) * c * h * w];
                let cols: &[T] = if geom.is_pointwise() {
                    x
                } else {
                    im2col(x, &geom, &mut col);
                    &col
                };
                let dst = &mut out[ni * o * hw_out..(ni + 1) * o * hw_out];
                gemm(o, ckk, hw_out, ws, Layout::Normal, cols, Layout::Normal, T::zero(), dst);
                if let Some(b) = bias {
                    let bs = self.data(b);
                    for oi in 0..o {
                        dst[oi * hw_out..(oi + 1) * hw_out].iter_mut().for_each(|v| *v += bs[oi]);
                    }
                }
            }
        }
        let out_shape = if in_shape.len() == 3 { vec![o, geom.ho, geom.wo] } else { vec![n, o, geom.ho, geom.wo] };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            &inputs,
            Box::new(move |g, vals, grads| {
                let xs = vals.data(input);
                let ws = vals.data(weight);
                if let Some(b) = bias {
                    if let Some(gb) = grads.slot(b) {
                        for ni in 0..n {
                            for oi in 0..o {
                                let s = ni * o * hw_out + oi * hw_out;
                                gb[oi] += g[s..s + hw_out].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let need_w = grads.needs(weight);
                let need_x = grads.needs(input);
                let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
                let mut dcol = if need_x && !geom.is_pointwise() { vec![T::zero(); ckk * hw_out] } else { Vec::new() };
                for ni in 0..n {
                    let gn = &g[ni * o * hw_out..(ni + 1) * o * hw_out];
                    let x = &xs[ni * c * h * w..(ni + 1) * c * h * w];
                    if need_w {
                        let cols: &[T] = if geom.is_pointwise() {
                            x
                        } else {
                            im2col(x, &geom, &mut col);
                            &col
                        };
                        let gw = grads.slot(weight).expect("weight grad");
                        gemm(o, hw_out, ckk, gn, Layout::Normal, cols, Layout::Transposed, T::one(), gw);
                    }
                    if need_x {
                        let gx = grads.slot(input).expect("input grad");
                        let gxn = &mut gx[ni * c * h * w..(ni + 1) * c * h * w];
                        if geom.is_pointwise() {
                            gemm(ckk, o, hw_out, ws, Layout::Transposed, gn, Layout::Normal, T::one(), gxn);
                        } else {
                            gemm(ckk, o, hw_out, ws, Layout::Transposed, gn, Layout::Normal, T::zero(), &mut dcol);
                            col2im(&dcol, &geom, gxn);
                        }
                    }
                }
            }),
        ))
    }

    /// 2x nearest-neighbour upsampling of `[C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample_nearest2x", self.shape(x))?;
        let (h2, w2) = (2 * h, 2 * w);
        let xs = self.data(x);
        let mut y = vec![T::zero(); c * h2 * w2];
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    y[(ci * h2 + i) * w2 + j] = xs[(ci * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[c, h2, w2], y)?,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    for ci in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                gx[(ci * h + i / 2) * w + j / 2] += g[(ci * h2 + i) * w2 + j];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// 2x bilinear upsampling of `[C,H,W]` with half-pixel centres and edge clamping.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample_bilinear2x", self.shape(x))?;
        let (h2, w2) = (2 * h, 2 * w);
        let rows: Vec<(usize, usize, T)> = upsample_taps(h).into_iter().map(|(a, b, t)| (a, b, T::of(t))).collect();
        let cols: Vec<(usize, usize, T)> = upsample_taps(w).into_iter().map(|(a, b, t)| (a, b, T::of(t))).collect();
        let xs = self.data(x);
        let mut y = vec![T::zero(); c * h2 * w2];
        for ci in 0..c {
            let p = &xs[ci * h * w..(ci + 1) * h * w];
            for (i, &(y0, y1, ty)) in rows.iter().enumerate() {
                for (j, &(x0, x1, tx)) in cols.iter().enumerate() {
                    let top = p[y0 * w + x0] * (T::one() - tx) + p[y0 * w + x1] * tx;
                    let bot = p[y1 * w + x0] * (T::one() - tx) + p[y1 * w + x1] * tx;
                    y[(ci * h2 + i) * w2 + j] = top * (T::one() - ty) + bot * ty;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[c, h2, w2], y)?,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    for ci in 0..c {
                        let p = &mut gx[ci * h * w..(ci + 1) * h * w];
                        for (i, &(y0, y1, ty)) in rows.iter().enumerate() {
                            for (j, &(x0, x1, tx)) in cols.iter().enumerate() {
                                let gv = g[(ci * h2 + i) * w2 + j];
                                let (a, b) = (gv * (T::one() - ty), gv * ty);
                                p[y0 * w + x0] += a * (T::one() - tx);
                                p[y0 * w + x1] += a * tx;
                                p[y1 * w + x0] += b * (T::one() - tx);
                                p[y1 * w + x1] += b * tx;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Per-plane 5-point Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with replicate
    /// padding, so constant planes map to zero everywhere.
    /// Accepts `[H,W]` or `[C,H,W]`.
    pub fn laplacian(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = match *shape.as_slice() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("laplacian", format!("expected 2-d or 3-d, got {shape:?}"))),
        };
        let xs = self.data(x);
        let mut y = vec![T::zero(); xs.len()];
        for p in 0..planes {
            let r = p * h * w..(p + 1) * h * w;
            laplacian_plane(&xs[r.clone()], h, w, &mut y[r]);
        }
        Ok(self.push(
            Tensor::new(&shape, y)?,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    for p in 0..planes {
                        let r = p * h * w..(p + 1) * h * w;
                        laplacian_plane_adjoint(&g[r.clone()], h, w, &mut gx[r]);
                    }
                }
            }),
        ))
    }
}

/// Plain (non-differentiable) Laplacian used for ground-truth edges.
pub fn laplacian_values(x: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    laplacian_plane(x, h, w, &mut out);
    out
}
