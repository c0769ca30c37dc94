//! Backward (pull) warping: `out(p) = src(p + u(p))`, trilinear, border-clamped.

use rayon::prelude::*;

use crate::error::{DdnError, Result};
use crate::field::DisplacementField;
use crate::tensor::{Graph, NodeId, Op, Real, Tensor5};
use crate::volume::{bracket, Volume3};

/// Trilinear stencil at a continuous point: the 8 corner indices, their
/// weights and, per axis, the weight derivatives needed for the coordinate
/// gradient (zero on axes where the point was clamped).
struct Stencil {
    idx: [usize; 8],
    w: [f64; 8],
    /// d(weight)/d(coordinate) for x, y, z.
    dw: [[f64; 8]; 3],
}

impl Stencil {
    #[inline]
    fn new(dims: [usize; 3], p: [f64; 3]) -> Self {
        let [w, h, d] = dims;
        let (x0, x1, fx) = bracket(p[0], w);
        let (y0, y1, fy) = bracket(p[1], h);
        let (z0, z1, fz) = bracket(p[2], d);
        let inside = |c: f64, n: usize| (0.0..=(n - 1) as f64).contains(&c);
        let sx = if inside(p[0], w) { 1.0 } else { 0.0 };
        let sy = if inside(p[1], h) { 1.0 } else { 0.0 };
        let sz = if inside(p[2], d) { 1.0 } else { 0.0 };
        let mut idx = [0; 8];
        let mut wt = [0.0; 8];
        let mut dw = [[0.0; 8]; 3];
        let mut k = 0;
        for (zi, wz, dz) in [(z0, 1.0 - fz, -sz), (z1, fz, sz)] {
            for (yi, wy, dy) in [(y0, 1.0 - fy, -sy), (y1, fy, sy)] {
                for (xi, wx, dx) in [(x0, 1.0 - fx, -sx), (x1, fx, sx)] {
                    idx[k] = (zi * h + yi) * w + xi;
                    wt[k] = wx * wy * wz;
                    dw[0][k] = dx * wy * wz;
                    dw[1][k] = wx * dy * wz;
                    dw[2][k] = wx * wy * dz;
                    k += 1;
                }
            }
        }
        Stencil { idx, w: wt, dw }
    }
}

/// Value of the trilinear interpolant, evaluated as nested lerps so a zero
/// fractional part returns the lattice value exactly.
#[inline]
fn interpolate<T: Real>(data: &[T], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [w, h, d] = dims;
    let (x0, x1, fx) = bracket(p[0], w);
    let (y0, y1, fy) = bracket(p[1], h);
    let (z0, z1, fz) = bracket(p[2], d);
    let v = |x: usize, y: usize, z: usize| data[(z * h + y) * w + x].f64();
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
    let c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), fx);
    let c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), fx);
    let c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), fx);
    let c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

struct WarpPatch;

fn check_shapes(src: [usize; 5], flow: [usize; 5]) -> Result<()> {
    if src[1] != 1 || flow[1] != 3 || src[0] != flow[0] || src[2..] != flow[2..] {
        return Err(DdnError::shape(format!(
            "warp needs src [N,1,D,H,W] and flow [N,3,D,H,W], got {src:?} and {flow:?}"
        )));
    }
    Ok(())
}

impl<T: Real> Op<T> for WarpPatch {
    fn name(&self) -> &'static str {
        "warp_patch"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let (src, flow) = (inputs[0], inputs[1]);
        check_shapes(src.shape(), flow.shape())?;
        let [n, _, d, h, w] = src.shape();
        let dims = [w, h, d];
        let mut out = Tensor5::zeros(src.shape());
        for ni in 0..n {
            let s = src.channel(ni, 0);
            let (ux, uy, uz) = (flow.channel(ni, 0), flow.channel(ni, 1), flow.channel(ni, 2));
            let dst = out.channel_mut(ni, 0);
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let p = [
                            x as f64 + ux[i].f64(),
                            y as f64 + uy[i].f64(),
                            z as f64 + uz[i].f64(),
                        ];
                        dst[i] = T::of(interpolate(s, dims, p));
                        i += 1;
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
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let (src, flow) = (inputs[0], inputs[1]);
        let [n, _, d, h, w] = src.shape();
        let dims = [w, h, d];
        let pl = src.plane_len();
        let mut dsrc = needs[0].then(|| Tensor5::zeros(src.shape()));
        let mut dflow = needs[1].then(|| Tensor5::zeros(flow.shape()));
        for ni in 0..n {
            let s = src.channel(ni, 0);
            let g = grad.channel(ni, 0);
            let (ux, uy, uz) = (flow.channel(ni, 0), flow.channel(ni, 1), flow.channel(ni, 2));
            let mut acc = needs[0].then(|| vec![0.0f64; pl]);
            let mut df = vec![[0.0f64; 3]; if needs[1] { pl } else { 0 }];
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let p = [
                            x as f64 + ux[i].f64(),
                            y as f64 + uy[i].f64(),
                            z as f64 + uz[i].f64(),
                        ];
                        let st = Stencil::new(dims, p);
                        let gi = g[i].f64();
                        if let Some(acc) = acc.as_mut() {
                            for k in 0..8 {
                                acc[st.idx[k]] += gi * st.w[k];
                            }
                        }
                        if needs[1] {
                            for a in 0..3 {
                                let mut s_a = 0.0;
                                for k in 0..8 {
                                    s_a += st.dw[a][k] * s[st.idx[k]].f64();
                                }
                                df[i][a] = gi * s_a;
                            }
                        }
                        i += 1;
                    }
                }
            }
            if let (Some(t), Some(acc)) = (dsrc.as_mut(), acc) {
                for (dst, a) in t.channel_mut(ni, 0).iter_mut().zip(acc) {
                    *dst = T::of(a);
                }
            }
            if let Some(t) = dflow.as_mut() {
                for a in 0..3 {
                    for (dst, v) in t.channel_mut(ni, a).iter_mut().zip(&df) {
                        *dst = T::of(v[a]);
                    }
                }
            }
        }
        vec![dsrc, dflow]
    }
}

impl<T: Real> Graph<T> {
    /// Differentiable warp of a one-channel image by a three-channel flow
    /// (channels are the x, y, z displacements along W, H, D).
    pub fn warp_patch(&mut self, src: NodeId, flow: NodeId) -> Result<NodeId> {
        self.apply(WarpPatch, &[src, flow])
    }
}

/// Warps a whole volume by a displacement field (no gradients).
pub fn warp_volume(vol: &Volume3, field: &DisplacementField) -> Result<Volume3> {
    let dims = vol.dims();
    if field.dims() != dims {
        return Err(DdnError::shape(format!(
            "field dims {:?} differ from volume dims {dims:?}",
            field.dims()
        )));
    }
    let [w, h, _] = dims;
    let plane = w * h;
    let data = vol.data();
    let [ux, uy, uz] = field.components();
    let mut out = vec![0.0f32; vol.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        for y in 0..h {
            for x in 0..w {
                let i = z * plane + y * w + x;
                let p = [
                    x as f64 + ux[i] as f64,
                    y as f64 + uy[i] as f64,
                    z as f64 + uz[i] as f64,
                ];
                slab[y * w + x] = interpolate(data, dims, p) as f32;
            }
        }
    });
    Volume3::new(dims, vol.spacing(), out)
}
