//! Elementwise, normalization, channel and resampling ops, plus the
//! convenience builders on [`Graph`].

use super::conv::{Conv3d, Padding};
use super::graph::{Graph, NodeId, Op};
use super::{Real, Tensor5};
use crate::error::{DdnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Infer {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
}

/// Per-channel batch mean and (biased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of<T: Real>(x: &Tensor5<T>) -> Self {
        let (n, c) = (x.n(), x.c());
        let m = (n * x.plane_len()) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += x.channel(ni, ch).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut q = 0.0;
            for ni in 0..n {
                q += x
                    .channel(ni, ch)
                    .iter()
                    .map(|v| {
                        let d = v.f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / m;
        }
        BatchStats { mean, var }
    }
}

struct BatchNorm<T> {
    mode: BatchNormMode,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> Op<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = x.c();
        if gamma.shape() != [1, c, 1, 1, 1] || beta.shape() != [1, c, 1, 1, 1] {
            return Err(DdnError::shape(format!(
                "batch_norm: affine params must be [1, {c}, 1, 1, 1]"
            )));
        }
        let (mean, var, eps) = match &self.mode {
            BatchNormMode::Train { eps } => {
                let s = BatchStats::of(x);
                (s.mean, s.var, *eps)
            }
            BatchNormMode::Infer { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(DdnError::shape("batch_norm: running stats size mismatch"));
                }
                (mean.clone(), var.clone(), *eps)
            }
        };
        self.inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = Tensor5::zeros(x.shape());
        let pl = x.plane_len();
        for ni in 0..x.n() {
            for ch in 0..c {
                let mu = T::of(mean[ch]);
                let is = T::of(self.inv_std[ch]);
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                let start = (ni * c + ch) * pl;
                let src = x.channel(ni, ch);
                let xh = &mut xhat[start..start + pl];
                let dst = out.channel_mut(ni, ch);
                for i in 0..pl {
                    let h = (src[i] - mu) * is;
                    xh[i] = h;
                    dst[i] = g * h + b;
                }
            }
        }
        self.xhat = xhat;
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, pl) = (x.n(), x.c(), x.plane_len());
        let m = (n * pl) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for ni in 0..n {
            for ch in 0..c {
                let start = (ni * c + ch) * pl;
                let g = grad.channel(ni, ch);
                let xh = &self.xhat[start..start + pl];
                for i in 0..pl {
                    sum_g[ch] += g[i].f64();
                    sum_gx[ch] += (g[i] * xh[i]).f64();
                }
            }
        }
        let train = matches!(self.mode, BatchNormMode::Train { .. });
        let dx = needs[0].then(|| {
            let mut dx = Tensor5::zeros(x.shape());
            for ni in 0..n {
                for ch in 0..c {
                    let start = (ni * c + ch) * pl;
                    let scale = gamma.data()[ch].f64() * self.inv_std[ch];
                    let g = grad.channel(ni, ch);
                    let xh = &self.xhat[start..start + pl];
                    let dst = dx.channel_mut(ni, ch);
                    if train {
                        let k = T::of(scale / m);
                        let mg = T::of(m);
                        let sg = T::of(sum_g[ch]);
                        let sgx = T::of(sum_gx[ch]);
                        for i in 0..pl {
                            dst[i] = k * (mg * g[i] - sg - xh[i] * sgx);
                        }
                    } else {
                        let s = T::of(scale);
                        for i in 0..pl {
                            dst[i] = g[i] * s;
                        }
                    }
                }
            }
            dx
        });
        let affine = |sums: &[f64]| {
            Tensor5::new([1, c, 1, 1, 1], sums.iter().map(|&v| T::of(v)).collect()).unwrap()
        };
        vec![
            dx,
            needs[1].then(|| affine(&sum_gx)),
            needs[2].then(|| affine(&sum_g)),
        ]
    }
}

struct LeakyRelu {
    slope: f64,
}

impl<T: Real> Op<T> for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let s = T::of(self.slope);
        Ok(inputs[0].map(|v| if v >= T::zero() { v } else { s * v }))
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let s = T::of(self.slope);
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| if v >= T::zero() { g } else { s * g })
            .collect();
        vec![Some(Tensor5::new(x.shape(), data).unwrap())]
    }
}

struct Concat;

impl<T: Real> Op<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let first = inputs
            .first()
            .ok_or_else(|| DdnError::shape("concat of zero tensors"))?;
        let n = first.n();
        let sp = first.spatial();
        for t in inputs {
            if t.n() != n || t.spatial() != sp {
                return Err(DdnError::shape(format!(
                    "concat: {:?} does not match {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
        }
        let c: usize = inputs.iter().map(|t| t.c()).sum();
        let mut data = Vec::with_capacity(n * c * first.plane_len());
        for ni in 0..n {
            for t in inputs {
                data.extend_from_slice(t.sample(ni));
            }
        }
        Tensor5::new([n, c, sp[0], sp[1], sp[2]], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let pl = grad.plane_len();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let len = t.c() * pl;
            if need {
                let mut data = Vec::with_capacity(t.len());
                for ni in 0..t.n() {
                    let s = grad.sample(ni);
                    data.extend_from_slice(&s[offset..offset + len]);
                }
                out.push(Some(Tensor5::new(t.shape(), data).unwrap()));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    }
}

/// Non-overlapping 2x2x2 mean; a trailing odd plane is dropped.
struct AvgPool2;

impl<T: Real> Op<T> for AvgPool2 {
    fn name(&self) -> &'static str {
        "avg_pool3d"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let x = inputs[0];
        let [n, c, d, h, w] = x.shape();
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        if od == 0 || oh == 0 || ow == 0 {
            return Err(DdnError::shape(format!("avg_pool3d: extent too small in {:?}", x.shape())));
        }
        let mut out = Tensor5::zeros([n, c, od, oh, ow]);
        let eighth = T::of(0.125);
        for ni in 0..n {
            for ch in 0..c {
                let src = x.channel(ni, ch);
                let dst = out.channel_mut(ni, ch);
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut s = T::zero();
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    let row = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo;
                                    s += src[row] + src[row + 1];
                                }
                            }
                            dst[(z * oh + y) * ow + xo] = s * eighth;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let x = inputs[0];
        let [n, c, _, h, w] = x.shape();
        let [_, _, od, oh, ow] = grad.shape();
        let mut dx = Tensor5::zeros(x.shape());
        let eighth = T::of(0.125);
        for ni in 0..n {
            for ch in 0..c {
                let g = grad.channel(ni, ch);
                let dst = dx.channel_mut(ni, ch);
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let v = g[(z * oh + y) * ow + xo] * eighth;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    let row = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo;
                                    dst[row] = v;
                                    dst[row + 1] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Linear interpolation taps along one axis for align-corners resizing.
fn align_corners_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Align-corners trilinear upsampling by an integer factor.
struct Upsample {
    factor: usize,
}

impl Upsample {
    fn taps(&self, sp: [usize; 3]) -> [Vec<(usize, usize, f64)>; 3] {
        [
            align_corners_taps(sp[0], sp[0] * self.factor),
            align_corners_taps(sp[1], sp[1] * self.factor),
            align_corners_taps(sp[2], sp[2] * self.factor),
        ]
    }
}

impl<T: Real> Op<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_trilinear"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let x = inputs[0];
        let [n, c, d, h, w] = x.shape();
        let f = self.factor;
        let [tz, ty, tx] = self.taps([d, h, w]);
        let (od, oh, ow) = (d * f, h * f, w * f);
        let mut out = Tensor5::zeros([n, c, od, oh, ow]);
        for ni in 0..n {
            for ch in 0..c {
                let src = x.channel(ni, ch);
                let dst = out.channel_mut(ni, ch);
                let v = |z: usize, y: usize, xx: usize| src[(z * h + y) * w + xx].f64();
                for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
                    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let c00 = v(z0, y0, x0) * (1.0 - fx) + v(z0, y0, x1) * fx;
                            let c01 = v(z0, y1, x0) * (1.0 - fx) + v(z0, y1, x1) * fx;
                            let c10 = v(z1, y0, x0) * (1.0 - fx) + v(z1, y0, x1) * fx;
                            let c11 = v(z1, y1, x0) * (1.0 - fx) + v(z1, y1, x1) * fx;
                            let c0 = c00 * (1.0 - fy) + c01 * fy;
                            let c1 = c10 * (1.0 - fy) + c11 * fy;
                            dst[(z * oh + y) * ow + xo] = T::of(c0 * (1.0 - fz) + c1 * fz);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let x = inputs[0];
        let [n, c, d, h, w] = x.shape();
        let f = self.factor;
        let [tz, ty, tx] = self.taps([d, h, w]);
        let (oh, ow) = (h * f, w * f);
        let mut dx = Tensor5::zeros(x.shape());
        for ni in 0..n {
            for ch in 0..c {
                let g = grad.channel(ni, ch);
                let mut acc = vec![0.0f64; d * h * w];
                for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
                    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g[(z * oh + y) * ow + xo].f64();
                            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                    let row = (zi * h + yi) * w;
                                    let base = gv * wz * wy;
                                    acc[row + x0] += base * (1.0 - fx);
                                    acc[row + x1] += base * fx;
                                }
                            }
                        }
                    }
                }
                for (dst, a) in dx.channel_mut(ni, ch).iter_mut().zip(acc) {
                    *dst = T::of(a);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct Scale {
    factor: f64,
}

impl<T: Real> Op<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let s = T::of(self.factor);
        Ok(inputs[0].map(|v| v * s))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let s = T::of(self.factor);
        vec![Some(grad.map(|g| g * s))]
    }
}

struct Add;

impl<T: Real> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(DdnError::shape(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = a.clone();
        out.add_assign(b);
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ]
    }
}

struct Mul;

impl<T: Real> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(DdnError::shape(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Tensor5::new(a.shape(), data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let times = |t: &Tensor5<T>| {
            let data = t.data().iter().zip(grad.data()).map(|(&x, &g)| x * g).collect();
            Tensor5::new(t.shape(), data).unwrap()
        };
        vec![needs[0].then(|| times(inputs[1])), needs[1].then(|| times(inputs[0]))]
    }
}

struct SumAll;

impl<T: Real> Op<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        Ok(Tensor5::scalar(T::of(inputs[0].sum_f64())))
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        vec![Some(Tensor5::filled(inputs[0].shape(), grad.item()))]
    }
}

/// Selects a contiguous range of channels.
struct Narrow {
    start: usize,
    len: usize,
}

impl<T: Real> Op<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let x = inputs[0];
        let [n, c, d, h, w] = x.shape();
        if self.start + self.len > c || self.len == 0 {
            return Err(DdnError::shape(format!(
                "narrow: channels {}..{} of {c}",
                self.start,
                self.start + self.len
            )));
        }
        let pl = x.plane_len();
        let mut data = Vec::with_capacity(n * self.len * pl);
        for ni in 0..n {
            let s = x.sample(ni);
            data.extend_from_slice(&s[self.start * pl..(self.start + self.len) * pl]);
        }
        Tensor5::new([n, self.len, d, h, w], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let x = inputs[0];
        let pl = x.plane_len();
        let mut dx = Tensor5::zeros(x.shape());
        for ni in 0..x.n() {
            let g = grad.sample(ni);
            dx.sample_mut(ni)[self.start * pl..(self.start + self.len) * pl].copy_from_slice(g);
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Graph<T> {
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.apply(Conv3d::new(stride, padding), &[x, w, b])
    }

    /// Batch normalization over `(N, D, H, W)` per channel. In training mode
    /// the batch statistics are returned so the caller can update its
    /// running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let stats = matches!(mode, BatchNormMode::Train { .. }).then(|| BatchStats::of(self.value(x)));
        let op = BatchNorm {
            mode,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        };
        Ok((self.apply(op, &[x, gamma, beta])?, stats))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.apply(LeakyRelu { slope }, &[x])
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.apply(Concat, xs)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(AvgPool2, &[x])
    }

    pub fn upsample_trilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(DdnError::shape("upsample factor must be >= 1"));
        }
        self.apply(Upsample { factor }, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Scale { factor }, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Mul, &[a, b])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(SumAll, &[x])
    }

    pub fn narrow_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Narrow { start, len }, &[x])
    }
}
