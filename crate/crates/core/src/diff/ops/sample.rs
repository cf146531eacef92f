//! Bilinear point sampling and deformable convolution.
//!
//! Both read the feature map with zero padding: each of the four bilinear
//! corners that falls outside the grid contributes zero, so a deformable
//! convolution with zero offsets is exactly a zero-padded convolution.

use crate::diff::graph::{Graph, Var};
use crate::diff::real::{gemm, Layout, Real};
use crate::diff::tensor::{chw, Tensor};
use crate::error::{Error, Result};

/// Bilinear footprint of one continuous `(y, x)` location.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint<T> {
    /// Flat indices of `(y0,x0) (y0,x1) (y1,x0) (y1,x1)`; invalid corners point at 0.
    idx: [u32; 4],
    /// 1 for in-bounds corners, 0 otherwise.
    valid: [T; 4],
    ly: T,
    lx: T,
    /// Bilinear weights, already zeroed for invalid corners.
    w: [T; 4],
}

impl<T: Real> Footprint<T> {
    pub(crate) fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let ly = y - y0f;
        let lx = x - x0f;
        let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
        let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
        let mut idx = [0u32; 4];
        let mut valid = [T::zero(); 4];
        for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                idx[i] = (yy as usize * w + xx as usize) as u32;
                valid[i] = T::one();
            }
        }
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let w = [hy * hx * valid[0], hy * lx * valid[1], ly * hx * valid[2], ly * lx * valid[3]];
        Self { idx, valid, ly, lx, w }
    }

    #[inline]
    fn corners(&self, plane: &[T]) -> [T; 4] {
        [
            plane[self.idx[0] as usize] * self.valid[0],
            plane[self.idx[1] as usize] * self.valid[1],
            plane[self.idx[2] as usize] * self.valid[2],
            plane[self.idx[3] as usize] * self.valid[3],
        ]
    }

    #[inline]
    fn sample(&self, plane: &[T]) -> T {
        let (w, i) = (&self.w, &self.idx);
        w[0] * plane[i[0] as usize]
            + w[1] * plane[i[1] as usize]
            + w[2] * plane[i[2] as usize]
            + w[3] * plane[i[3] as usize]
    }

    /// `(d/dy, d/dx)` of the sampled value.
    #[inline]
    fn slope(&self, plane: &[T]) -> (T, T) {
        let v = self.corners(plane);
        let (hy, hx) = (T::one() - self.ly, T::one() - self.lx);
        let dy = hx * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = hy * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (dy, dx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            plane[self.idx[i] as usize] += g * self.w[i];
        }
    }
}

struct DeformGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl DeformGeom {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn footprints<T: Real>(&self, offsets: &[T]) -> Vec<Footprint<T>> {
        let hw = self.h * self.w;
        let (py, px) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut out = Vec::with_capacity(self.taps() * hw);
        for t in 0..self.taps() {
            let (ky, kx) = ((t / self.kw) as isize, (t % self.kw) as isize);
            let dy = &offsets[2 * t * hw..(2 * t + 1) * hw];
            let dx = &offsets[(2 * t + 1) * hw..(2 * t + 2) * hw];
            for oy in 0..self.h {
                for ox in 0..self.w {
                    let p = oy * self.w + ox;
                    let y = T::of((oy as isize + ky - py) as f64) + dy[p];
                    let x = T::of((ox as isize + kx - px) as f64) + dx[p];
                    out.push(Footprint::new(y, x, self.h, self.w));
                }
            }
        }
        out
    }

    /// Deformable im2col: rows `c * taps + t`, columns output positions.
    /// Channels are the inner loop so each footprint is read once.
    fn columns<T: Real>(&self, x: &[T], fps: &[Footprint<T>], col: &mut [T]) {
        let hw = self.h * self.w;
        let k = self.taps();
        for t in 0..k {
            for p in 0..hw {
                let f = &fps[t * hw + p];
                for ci in 0..self.c {
                    col[(ci * k + t) * hw + p] = f.sample(&x[ci * hw..(ci + 1) * hw]);
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Samples `[C,H,W]` at `[P,2]` continuous `(y, x)` points, giving `[C,P]`.
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let (c, h, w) = chw("bilinear_sample", self.shape(feature))?;
        let np = match *self.shape(points) {
            [p, 2] => p,
            ref s => return Err(Error::shape("bilinear_sample", format!("points must be [P,2], got {s:?}"))),
        };
        let hw = h * w;
        let pts = self.data(points);
        let fps: Vec<Footprint<T>> = (0..np).map(|p| Footprint::new(pts[2 * p], pts[2 * p + 1], h, w)).collect();
        let fs = self.data(feature);
        let mut y = vec![T::zero(); c * np];
        for ci in 0..c {
            let plane = &fs[ci * hw..(ci + 1) * hw];
            for (p, f) in fps.iter().enumerate() {
                y[ci * np + p] = f.sample(plane);
            }
        }
        Ok(self.push(
            Tensor::new(&[c, np], y)?,
            &[feature, points],
            Box::new(move |g, vals, grads| {
                if let Some(gf) = grads.slot(feature) {
                    for ci in 0..c {
                        let plane = &mut gf[ci * hw..(ci + 1) * hw];
                        for (p, f) in fps.iter().enumerate() {
                            f.scatter(plane, g[ci * np + p]);
                        }
                    }
                }
                if let Some(gp) = grads.slot(points) {
                    let fs = vals.data(feature);
                    for ci in 0..c {
                        let plane = &fs[ci * hw..(ci + 1) * hw];
                        for (p, f) in fps.iter().enumerate() {
                            let (dy, dx) = f.slope(plane);
                            let gv = g[ci * np + p];
                            gp[2 * p] += gv * dy;
                            gp[2 * p + 1] += gv * dx;
                        }
                    }
                }
            }),
        ))
    }

    /// Deformable convolution, stride 1 and "same" padding.
    ///
    /// `input` is `[C,H,W]`, `weight` `[O,C,kh,kw]` (odd kernel), `offsets`
    /// `[2*kh*kw,H,W]` with channel `2t` the row shift and `2t+1` the column
    /// shift of tap `t` (row-major over the kernel).
    pub fn deform_conv(&mut self, input: Var, weight: Var, bias: Option<Var>, offsets: Var) -> Result<Var> {
        let (c, h, w) = chw("deform_conv", self.shape(input))?;
        let (o, kc, kh, kw) = match *self.shape(weight) {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            ref s => return Err(Error::shape("deform_conv", format!("weight must be [O,C,kh,kw], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape("deform_conv", format!("input channels {c} do not match weight channels {kc}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("deform_conv", format!("kernel {kh}x{kw} must be odd")));
        }
        let geom = DeformGeom { c, h, w, kh, kw };
        let k = geom.taps();
        match *self.shape(offsets) {
            [oc, oh, ow] if oc == 2 * k && (oh, ow) == (h, w) => {}
            [oc, _, _] if oc != 2 * k => {
                return Err(Error::shape("deform_conv", format!("offset map has {oc} channels, expected {}", 2 * k)))
            }
            ref s => {
                return Err(Error::shape(
                    "deform_conv",
                    format!("offset map {s:?} does not match input spatial size {h}x{w}"),
                ))
            }
        }
        if let Some(b) = bias {
            if self.value(b).numel() != o {
                return Err(Error::shape(
                    "deform_conv",
                    format!("bias has {} entries for {o} output channels", self.value(b).numel()),
                ));
            }
        }
        let hw = h * w;
        let ck = c * k;
        let fps = geom.footprints(self.data(offsets));
        let mut col = vec![T::zero(); ck * hw];
        geom.columns(self.data(input), &fps, &mut col);
        let mut out = vec![T::zero(); o * hw];
        gemm(o, ck, hw, self.data(weight), Layout::Normal, &col, Layout::Normal, T::zero(), &mut out);
        if let Some(b) = bias {
            let bs = self.data(b);
            for oi in 0..o {
                out[oi * hw..(oi + 1) * hw].iter_mut().for_each(|v| *v += bs[oi]);
            }
        }
        drop(col);
        let mut inputs = vec![input, weight, offsets];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(&[o, h, w], out)?,
            &inputs,
            Box::new(move |g, vals, grads| {
                let xs = vals.data(input);
                let ws = vals.data(weight);
                let fps = geom.footprints(vals.data(offsets));
                if let Some(b) = bias {
                    if let Some(gb) = grads.slot(b) {
                        for oi in 0..o {
                            gb[oi] += g[oi * hw..(oi + 1) * hw].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(gw) = grads.slot(weight) {
                    let mut col = vec![T::zero(); ck * hw];
                    geom.columns(xs, &fps, &mut col);
                    gemm(o, hw, ck, g, Layout::Normal, &col, Layout::Transposed, T::one(), gw);
                }
                let need_x = grads.needs(input);
                let need_off = grads.needs(offsets);
                if !need_x && !need_off {
                    return;
                }
                let mut dcol = vec![T::zero(); ck * hw];
                gemm(ck, o, hw, ws, Layout::Transposed, g, Layout::Normal, T::zero(), &mut dcol);
                if let Some(gx) = grads.slot(input) {
                    for t in 0..k {
                        for p in 0..hw {
                            let f = &fps[t * hw + p];
                            for ci in 0..c {
                                f.scatter(&mut gx[ci * hw..(ci + 1) * hw], dcol[(ci * k + t) * hw + p]);
                            }
                        }
                    }
                }
                if let Some(go) = grads.slot(offsets) {
                    for t in 0..k {
                        for p in 0..hw {
                            let f = &fps[t * hw + p];
                            let (mut gy, mut gx) = (T::zero(), T::zero());
                            for ci in 0..c {
                                let (dy, dx) = f.slope(&xs[ci * hw..(ci + 1) * hw]);
                                let d = dcol[(ci * k + t) * hw + p];
                                gy += d * dy;
                                gx += d * dx;
                            }
                            go[2 * t * hw + p] += gy;
                            go[(2 * t + 1) * hw + p] += gx;
                        }
                    }
                }
            }),
        ))
    }
}
