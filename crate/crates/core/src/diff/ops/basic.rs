//! Elementwise, reduction and small dense primitives.

use crate::diff::graph::{Graph, Var};
use crate::diff::real::{gemm, Layout, Real};
use crate::diff::tensor::{chw, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    fn next_var(&self) -> Var {
        Var(self.len())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let out = self.next_var();
        let value = Tensor::new(self.shape(x), self.data(x).iter().map(|&v| f(v)).collect()).expect("unary shape");
        self.push(
            value,
            &[x],
            Box::new(move |g, vals, grads| {
                if let Some(gx) = grads.slot(x) {
                    let xs = vals.data(x);
                    let ys = vals.data(out);
                    for i in 0..g.len() {
                        gx[i] += g[i] * df(xs[i], ys[i]);
                    }
                }
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = Tensor::new(self.shape(a), self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect())?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, _, grads| {
                for v in [a, b] {
                    if let Some(gv) = grads.slot(v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = Tensor::new(self.shape(a), self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect())?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, _, grads| {
                if let Some(ga) = grads.slot(a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = grads.slot(b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = Tensor::new(self.shape(a), self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect())?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, vals, grads| {
                if let Some(ga) = grads.slot(a) {
                    let bs = vals.data(b);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bs[i];
                    }
                }
                if let Some(gb) = grads.slot(b) {
                    let as_ = vals.data(a);
                    for i in 0..g.len() {
                        gb[i] += g[i] * as_[i];
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        self.unary(x, move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), |v, _| if v > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |v, _| T::one() / v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |v, _| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |v, _| {
                if v >= lo && v <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.data(x));
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Scalar `a · b` over equally shaped operands.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }),
        ))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.value(x).numel() != 1 {
                return Err(Error::shape("stack", format!("non-scalar input {:?}", self.shape(x))));
            }
            data.push(self.data(x)[0]);
        }
        let inputs = xs.to_vec();
        Ok(self.push(
            Tensor::new(&[xs.len()], data)?,
            xs,
            Box::new(move |g, _, grads| {
                for (i, &x) in inputs.iter().enumerate() {
                    if let Some(gx) = grads.slot(x) {
                        gx[0] += g[i];
                    }
                }
            }),
        ))
    }

    /// Selects element `i` of a flat tensor as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if i >= n {
            return Err(Error::shape("index", format!("index {i} out of range for {n} elements")));
        }
        let v = self.data(x)[i];
        Ok(self.push(
            Tensor::scalar(v),
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    gx[i] += g[0];
                }
            }),
        ))
    }

    /// `Σ_k w[k] · terms[k]` over scalar terms. Terms whose weight is exactly
    /// zero receive no gradient at all, so their subgraphs are never visited.
    pub fn gate(&mut self, weights: Var, terms: &[Var]) -> Result<Var> {
        let k = self.value(weights).numel();
        if k != terms.len() {
            return Err(Error::shape("gate", format!("{k} weights for {} terms", terms.len())));
        }
        let mut total = T::zero();
        for (i, &t) in terms.iter().enumerate() {
            if self.value(t).numel() != 1 {
                return Err(Error::shape("gate", format!("term {i} is not scalar")));
            }
            total += self.data(weights)[i] * self.data(t)[0];
        }
        let mut inputs = vec![weights];
        inputs.extend_from_slice(terms);
        let terms = terms.to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            &inputs,
            Box::new(move |g, vals, grads| {
                let w = vals.data(weights).to_vec();
                if let Some(gw) = grads.slot(weights) {
                    for (i, &t) in terms.iter().enumerate() {
                        gw[i] += g[0] * vals.data(t)[0];
                    }
                }
                for (i, &t) in terms.iter().enumerate() {
                    if w[i] != T::zero() {
                        if let Some(gt) = grads.slot(t) {
                            gt[0] += g[0] * w[i];
                        }
                    }
                }
            }),
        ))
    }

    /// Numerically stable softmax over a flat vector.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if self.value(logits).numel() < 2 {
            return Err(Error::shape("softmax", "need at least two logits"));
        }
        let xs = self.data(logits);
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        let p: Vec<T> = e.into_iter().map(|x| x / z).collect();
        let out = self.next_var();
        Ok(self.push(
            Tensor::new(&shape, p)?,
            &[logits],
            Box::new(move |g, vals, grads| {
                if let Some(gx) = grads.slot(logits) {
                    let p = vals.data(out);
                    let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    for i in 0..p.len() {
                        gx[i] += p[i] * (g[i] - dot);
                    }
                }
            }),
        ))
    }

    /// Forward value is `one_hot(argmax y)` (lowest index wins ties); the
    /// backward pass hands the incoming gradient to `y` unchanged.
    pub fn straight_through(&mut self, y: Var) -> Var {
        let data = self.data(y);
        let k = argmax(data);
        let mut hard = vec![T::zero(); data.len()];
        hard[k] = T::one();
        let value = Tensor::new(self.shape(y), hard).expect("one-hot shape");
        self.push(
            value,
            &[y],
            Box::new(move |g, _, grads| {
                if let Some(gy) = grads.slot(y) {
                    gy.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }),
        )
    }

    /// Mean binary cross-entropy against a constant target, predictions clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("prediction {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let eps = T::of(eps);
        let hi = T::one() - eps;
        let n = T::of(target.numel() as f64);
        let ps = self.data(pred);
        let ts = target.data();
        let mut total = T::zero();
        for i in 0..ps.len() {
            let p = ps[i].max(eps).min(hi);
            let t = ts[i];
            total -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
        }
        let target = target.data().to_vec();
        Ok(self.push(
            Tensor::scalar(total / n),
            &[pred],
            Box::new(move |g, vals, grads| {
                if let Some(gp) = grads.slot(pred) {
                    let ps = vals.data(pred);
                    let s = g[0] / n;
                    for i in 0..ps.len() {
                        let p = ps[i];
                        if p >= eps && p <= hi {
                            let t = target[i];
                            gp[i] += s * (p - t) / (p * (T::one() - p));
                        }
                    }
                }
            }),
        ))
    }

    /// Fully-connected layer `w @ x + b` on a flat input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n_in = self.value(x).numel();
        let (n_out, w_in) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape("linear", format!("weight must be 2-d, got {s:?}"))),
        };
        if w_in != n_in {
            return Err(Error::shape("linear", format!("input has {n_in} features, weight expects {w_in}")));
        }
        if self.value(b).numel() != n_out {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, expected {n_out}", self.value(b).numel()),
            ));
        }
        let mut y = self.data(b).to_vec();
        gemm(n_out, n_in, 1, self.data(w), Layout::Normal, self.data(x), Layout::Normal, T::one(), &mut y);
        Ok(self.push(
            Tensor::new(&[n_out], y)?,
            &[x, w, b],
            Box::new(move |g, vals, grads| {
                if let Some(gb) = grads.slot(b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gw) = grads.slot(w) {
                    gemm(n_out, 1, n_in, g, Layout::Normal, vals.data(x), Layout::Normal, T::one(), gw);
                }
                if let Some(gx) = grads.slot(x) {
                    gemm(n_in, n_out, 1, vals.data(w), Layout::Transposed, g, Layout::Normal, T::one(), gx);
                }
            }),
        ))
    }

    /// `[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let xs = self.data(x);
        let y: Vec<T> = (0..c).map(|ci| xs[ci * hw..(ci + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(
            Tensor::new(&[c], y)?,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(gx) = grads.slot(x) {
                    for ci in 0..c {
                        let s = g[ci] * inv;
                        gx[ci * hw..(ci + 1) * hw].iter_mut().for_each(|d| *d += s);
                    }
                }
            }),
        ))
    }

    /// Multiplies channel `c` of `[C,H,W]` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = chw("channel_scale", self.shape(x))?;
        if self.value(s).numel() != c {
            return Err(Error::shape("channel_scale", format!("{} scales for {c} channels", self.value(s).numel())));
        }
        let hw = h * w;
        let xs = self.data(x);
        let ss = self.data(s);
        let y: Vec<T> = (0..c * hw).map(|i| xs[i] * ss[i / hw]).collect();
        Ok(self.push(
            Tensor::new(&[c, h, w], y)?,
            &[x, s],
            Box::new(move |g, vals, grads| {
                if let Some(gx) = grads.slot(x) {
                    let ss = vals.data(s);
                    for i in 0..g.len() {
                        gx[i] += g[i] * ss[i / hw];
                    }
                }
                if let Some(gs) = grads.slot(s) {
                    let xs = vals.data(x);
                    for ci in 0..c {
                        let r = ci * hw..(ci + 1) * hw;
                        gs[ci] += g[r.clone()].iter().zip(&xs[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }),
        ))
    }

    /// Concatenates `[Ca,H,W]` and `[Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = chw("concat_channels", self.shape(a))?;
        let (cb, hb, wb) = chw("concat_channels", self.shape(b))?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat_channels", format!("spatial size {ha}x{wa} vs {hb}x{wb}")));
        }
        let na = self.value(a).numel();
        let mut y = self.data(a).to_vec();
        y.extend_from_slice(self.data(b));
        Ok(self.push(
            Tensor::new(&[ca + cb, ha, wa], y)?,
            &[a, b],
            Box::new(move |g, _, grads| {
                if let Some(ga) = grads.slot(a) {
                    ga.iter_mut().zip(&g[..na]).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = grads.slot(b) {
                    gb.iter_mut().zip(&g[na..]).for_each(|(d, &s)| *d += s);
                }
            }),
        ))
    }
}

/// Index of the largest entry; the lowest index wins exact ties.
/// Pairwise summation: rounding error grows with `log n` instead of `n`,
/// which keeps large reductions usable under finite differences.
pub(crate) fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().copied().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
