//! 3D convolution as a sum of shifted 1x1 products over a zero-padded grid.
//!
//! The input of each sample is copied into a padded buffer whose rows are
//! flattened `(z, y, x)` planes. For stride 1 the output value at padded-grid
//! index `j` is `sum_ci sum_k in[ci][j + off_k] * w[co][ci][k]`, where `off_k`
//! is the flat offset of kernel tap `k`. Positions of `j` that fall into the
//! padding margin are computed and discarded. The input gradient is the same
//! product with flipped taps over a grid shifted by the largest offset, so one
//! register-blocked kernel serves both directions.

use rayon::prelude::*;

use super::graph::Op;
use super::{Real, Tensor5};
use crate::error::{DdnError, Result};

/// Output channels computed per kernel call.
const CB: usize = 8;
/// Grid positions per register block.
const JB: usize = 16;
/// Grid positions per weight-gradient chunk.
const JC: usize = 64 * JB;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`; output extent `ceil(n / stride)`.
    Same,
    /// No padding; output extent `(n - k) / stride + 1`.
    Valid,
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    use std::sync::OnceLock;
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

#[inline(always)]
fn madd<T: Real, const FMA: bool>(a: T, b: T, acc: T) -> T {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

/// `out[c][j] = sum_ci sum_k inp[ci * in_stride + base + j + offs[k]] * wpk[(ci * nk + k) * CB + c]`
/// for `j < nj` (a multiple of `JB`).
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn shifted_gemm_impl<T: Real, const FMA: bool>(
    inp: &[T],
    in_stride: usize,
    base: usize,
    cin: usize,
    offs: &[usize],
    wpk: &[T],
    out: &mut [T],
    out_stride: usize,
    nj: usize,
) {
    let nk = offs.len();
    let mut j0 = 0;
    while j0 < nj {
        let mut acc = [[T::zero(); JB]; CB];
        for ci in 0..cin {
            let row = &inp[ci * in_stride + base + j0..];
            let wrow = &wpk[ci * nk * CB..(ci + 1) * nk * CB];
            for (k, &o) in offs.iter().enumerate() {
                let x: &[T; JB] = row[o..o + JB].try_into().unwrap();
                let w: &[T; CB] = wrow[k * CB..k * CB + CB].try_into().unwrap();
                for c in 0..CB {
                    for l in 0..JB {
                        acc[c][l] = madd::<T, FMA>(x[l], w[c], acc[c][l]);
                    }
                }
            }
        }
        for (c, a) in acc.iter().enumerate() {
            out[c * out_stride + j0..c * out_stride + j0 + JB].copy_from_slice(a);
        }
        j0 += JB;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn shifted_gemm_fma<T: Real>(
    inp: &[T],
    in_stride: usize,
    base: usize,
    cin: usize,
    offs: &[usize],
    wpk: &[T],
    out: &mut [T],
    out_stride: usize,
    nj: usize,
) {
    shifted_gemm_impl::<T, true>(inp, in_stride, base, cin, offs, wpk, out, out_stride, nj)
}

#[allow(clippy::too_many_arguments)]
fn shifted_gemm<T: Real>(
    inp: &[T],
    in_stride: usize,
    base: usize,
    cin: usize,
    offs: &[usize],
    wpk: &[T],
    out: &mut [T],
    out_stride: usize,
    nj: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { shifted_gemm_fma(inp, in_stride, base, cin, offs, wpk, out, out_stride, nj) };
        return;
    }
    shifted_gemm_impl::<T, false>(inp, in_stride, base, cin, offs, wpk, out, out_stride, nj)
}

/// `dw[(c * cin + ci) * nk + k] += sum_j g[c * g_stride + g_base + j] * inp[ci * in_stride + j + offs[k]]`
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn weight_grad_impl<T: Real, const FMA: bool>(
    g: &[T],
    g_stride: usize,
    g_base: usize,
    inp: &[T],
    in_stride: usize,
    cin: usize,
    offs: &[usize],
    nj: usize,
    dw: &mut [T],
) {
    let nk = offs.len();
    let mut c0 = 0;
    while c0 < nj {
        let c1 = (c0 + JC).min(nj);
        for ci in 0..cin {
            let row = &inp[ci * in_stride..];
            for (k, &o) in offs.iter().enumerate() {
                let mut acc = [[T::zero(); JB]; CB];
                let mut j = c0;
                while j < c1 {
                    let x: &[T; JB] = row[j + o..j + o + JB].try_into().unwrap();
                    for (c, a) in acc.iter_mut().enumerate() {
                        let gs = g_base + c * g_stride + j;
                        let gv: &[T; JB] = g[gs..gs + JB].try_into().unwrap();
                        for l in 0..JB {
                            a[l] = madd::<T, FMA>(gv[l], x[l], a[l]);
                        }
                    }
                    j += JB;
                }
                for (c, a) in acc.iter().enumerate() {
                    let mut s = T::zero();
                    for &v in a {
                        s += v;
                    }
                    dw[(c * cin + ci) * nk + k] += s;
                }
            }
        }
        c0 = c1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn weight_grad_fma<T: Real>(
    g: &[T],
    g_stride: usize,
    g_base: usize,
    inp: &[T],
    in_stride: usize,
    cin: usize,
    offs: &[usize],
    nj: usize,
    dw: &mut [T],
) {
    weight_grad_impl::<T, true>(g, g_stride, g_base, inp, in_stride, cin, offs, nj, dw)
}

#[allow(clippy::too_many_arguments)]
fn weight_grad<T: Real>(
    g: &[T],
    g_stride: usize,
    g_base: usize,
    inp: &[T],
    in_stride: usize,
    cin: usize,
    offs: &[usize],
    nj: usize,
    dw: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { weight_grad_fma(g, g_stride, g_base, inp, in_stride, cin, offs, nj, dw) };
        return;
    }
    weight_grad_impl::<T, false>(g, g_stride, g_base, inp, in_stride, cin, offs, nj, dw)
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Index arithmetic shared by forward and backward.
#[derive(Debug, Clone)]
struct Geometry {
    cin: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    out: [usize; 3],
    /// Flat strides of the padded grid: (z, y).
    sz: usize,
    sy: usize,
    offs: Vec<usize>,
    maxoff: usize,
    /// Grid positions evaluated by the forward kernel (multiple of `JB`).
    nj: usize,
    /// Row length of the padded input buffer.
    in_row: usize,
}

impl Geometry {
    fn new(x: [usize; 5], w: [usize; 5], b: [usize; 5], stride: usize, padding: Padding) -> Result<Self> {
        let [_, cin, d, h, wd] = x;
        let [cout, wcin, k, k1, k2] = w;
        if wcin != cin {
            return Err(DdnError::shape(format!(
                "conv3d: input has {cin} channels, weights expect {wcin}"
            )));
        }
        if k != k1 || k != k2 || k == 0 {
            return Err(DdnError::shape(format!("conv3d: kernel must be cubic, got {w:?}")));
        }
        if b != [1, cout, 1, 1, 1] {
            return Err(DdnError::shape(format!(
                "conv3d: bias shape {b:?}, expected [1, {cout}, 1, 1, 1]"
            )));
        }
        if stride == 0 {
            return Err(DdnError::shape("conv3d: stride must be >= 1"));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(DdnError::shape("conv3d: same padding needs an odd kernel"));
                }
                (k - 1) / 2
            }
            Padding::Valid => 0,
        };
        let input = [d, h, wd];
        let mut full = [0; 3];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad;
            if padded < k {
                return Err(DdnError::shape(format!(
                    "conv3d: extent {} smaller than kernel {k}",
                    input[a]
                )));
            }
            full[a] = padded - k + 1;
            out[a] = (full[a] - 1) / stride + 1;
        }
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let sz = hp * wp;
        let sy = wp;
        let mut offs = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    offs.push(kz * sz + ky * sy + kx);
                }
            }
        }
        let maxoff = (k - 1) * (sz + sy + 1);
        let nj = round_up((full[0] - 1) * sz + (full[1] - 1) * sy + full[2], JB);
        let lp = (d + 2 * pad) * sz;
        let in_row = lp.max(nj + maxoff);
        Ok(Geometry {
            cin,
            cout,
            stride,
            pad,
            input,
            out,
            sz,
            sy,
            offs,
            maxoff,
            nj,
            in_row,
        })
    }

    fn nk(&self) -> usize {
        self.offs.len()
    }

    /// Zero-padded copy of one sample, `[cin][in_row]`.
    fn pad_sample<T: Real>(&self, x: &[T]) -> Vec<T> {
        let [d, h, w] = self.input;
        let p = self.pad;
        let mut buf = vec![T::zero(); self.cin * self.in_row];
        for ci in 0..self.cin {
            let src = &x[ci * d * h * w..(ci + 1) * d * h * w];
            let dst = &mut buf[ci * self.in_row..(ci + 1) * self.in_row];
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let t = (z + p) * self.sz + (y + p) * self.sy + p;
                    dst[t..t + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        buf
    }

    /// Flat grid index of strided output voxel `(oz, oy, ox)`.
    #[inline]
    fn out_grid(&self, oz: usize, oy: usize, ox: usize) -> usize {
        let s = self.stride;
        oz * s * self.sz + oy * s * self.sy + ox * s
    }
}

/// Packs `w[co0 .. co0 + CB][ci][k]` as `[ci][k][CB]`, zero-filling missing channels.
fn pack_forward<T: Real>(w: &[T], cout: usize, cin: usize, nk: usize, co0: usize) -> Vec<T> {
    let mut pk = vec![T::zero(); cin * nk * CB];
    for c in 0..CB.min(cout - co0) {
        let co = co0 + c;
        for ci in 0..cin {
            for k in 0..nk {
                pk[(ci * nk + k) * CB + c] = w[(co * cin + ci) * nk + k];
            }
        }
    }
    pk
}

/// Packs the transposed, tap-flipped weights for the input gradient:
/// output channel `ci0 + c` reads input channel `co` at tap `nk - 1 - k`.
fn pack_transposed<T: Real>(w: &[T], cout: usize, cin: usize, nk: usize, ci0: usize) -> Vec<T> {
    let mut pk = vec![T::zero(); cout * nk * CB];
    for c in 0..CB.min(cin - ci0) {
        let ci = ci0 + c;
        for co in 0..cout {
            for k in 0..nk {
                pk[(co * nk + k) * CB + c] = w[(co * cin + ci) * nk + (nk - 1 - k)];
            }
        }
    }
    pk
}

/// Graph op: `conv3d(x, w, b)` with cross-correlation semantics.
pub struct Conv3d {
    stride: usize,
    padding: Padding,
}

impl Conv3d {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Conv3d { stride, padding }
    }
}

pub(crate) fn conv3d_forward<T: Real>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    b: &Tensor5<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor5<T>> {
    let g = Geometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
    let n = x.n();
    let nk = g.nk();
    let [od, oh, ow] = g.out;
    let out_plane = od * oh * ow;
    let co_blocks = g.cout.div_ceil(CB);
    let packs: Vec<Vec<T>> = (0..co_blocks)
        .map(|cb| pack_forward(w.data(), g.cout, g.cin, nk, cb * CB))
        .collect();
    let bias = b.data();

    let mut out = Tensor5::zeros([n, g.cout, od, oh, ow]);
    out.data_mut()
        .par_chunks_mut(g.cout * out_plane)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let padded = g.pad_sample(x.sample(ni));
            let mut grid = vec![T::zero(); CB * g.nj];
            for (cb, pk) in packs.iter().enumerate() {
                shifted_gemm(&padded, g.in_row, 0, g.cin, &g.offs, pk, &mut grid, g.nj, g.nj);
                for c in 0..CB.min(g.cout - cb * CB) {
                    let co = cb * CB + c;
                    let src = &grid[c * g.nj..(c + 1) * g.nj];
                    let dst = &mut out_n[co * out_plane..(co + 1) * out_plane];
                    let bv = bias[co];
                    let mut i = 0;
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dst[i] = src[g.out_grid(oz, oy, ox)] + bv;
                                i += 1;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

impl<T: Real> Op<T> for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        conv3d_forward(inputs[0], inputs[1], inputs[2], self.stride, self.padding)
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let g = Geometry::new(x.shape(), w.shape(), b.shape(), self.stride, self.padding)
            .expect("geometry validated in forward");
        let n = x.n();
        let nk = g.nk();
        let [od, oh, ow] = g.out;
        let [d, h, wd] = g.input;
        let out_plane = od * oh * ow;
        let in_plane = d * h * wd;

        // Gradient scattered onto the padded grid, preceded by `maxoff` zeros.
        let g_row = g.maxoff + g.in_row.max(g.nj) + g.maxoff + JB;
        let scatter = |ni: usize| -> Vec<T> {
            let mut buf = vec![T::zero(); g.cout * g_row];
            let gn = grad.sample(ni);
            for co in 0..g.cout {
                let src = &gn[co * out_plane..(co + 1) * out_plane];
                let dst = &mut buf[co * g_row..(co + 1) * g_row];
                let mut i = 0;
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[g.maxoff + g.out_grid(oz, oy, ox)] = src[i];
                            i += 1;
                        }
                    }
                }
            }
            buf
        };

        let need_x = needs[0];
        let need_w = needs[1];
        let need_b = needs[2];

        // Input gradient range on the padded grid.
        let p = g.pad;
        let q0 = p * (g.sz + g.sy + 1);
        let q1 = (d - 1 + p) * g.sz + (h - 1 + p) * g.sy + (wd - 1 + p);
        let nq = round_up(q1 - q0 + 1, JB);
        let ci_blocks = g.cin.div_ceil(CB);
        let tpacks: Vec<Vec<T>> = if need_x {
            (0..ci_blocks)
                .map(|cb| pack_transposed(w.data(), g.cout, g.cin, nk, cb * CB))
                .collect()
        } else {
            Vec::new()
        };
        let co_blocks = g.cout.div_ceil(CB);

        struct PerSample<T> {
            dx: Option<Vec<T>>,
            dw: Option<Vec<T>>,
        }
        let per_sample: Vec<PerSample<T>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let gbuf = scatter(ni);
                let dx = need_x.then(|| {
                    let mut dx = vec![T::zero(); g.cin * in_plane];
                    let mut grid = vec![T::zero(); CB * nq];
                    // the gradient buffer must cover every read of the kernel
                    debug_assert!(q0 + nq + g.maxoff <= g_row);
                    for (cb, pk) in tpacks.iter().enumerate() {
                        shifted_gemm(&gbuf, g_row, q0, g.cout, &g.offs, pk, &mut grid, nq, nq);
                        for c in 0..CB.min(g.cin - cb * CB) {
                            let ci = cb * CB + c;
                            let src = &grid[c * nq..(c + 1) * nq];
                            let dst = &mut dx[ci * in_plane..(ci + 1) * in_plane];
                            let mut i = 0;
                            for z in 0..d {
                                for y in 0..h {
                                    let row = (z + p) * g.sz + (y + p) * g.sy + p - q0;
                                    dst[i..i + wd].copy_from_slice(&src[row..row + wd]);
                                    i += wd;
                                }
                            }
                        }
                    }
                    dx
                });
                let dw = need_w.then(|| {
                    let padded = g.pad_sample(x.sample(ni));
                    let mut dw = vec![T::zero(); g.cout * g.cin * nk];
                    for cb in 0..co_blocks {
                        let rows = CB.min(g.cout - cb * CB);
                        let mut part = vec![T::zero(); CB * g.cin * nk];
                        if rows == CB {
                            weight_grad(
                                &gbuf[cb * CB * g_row..],
                                g_row,
                                g.maxoff,
                                &padded,
                                g.in_row,
                                g.cin,
                                &g.offs,
                                g.nj,
                                &mut part,
                            );
                        } else {
                            // pad the trailing channel block with zero rows
                            let mut tail = vec![T::zero(); CB * g_row];
                            tail[..rows * g_row]
                                .copy_from_slice(&gbuf[cb * CB * g_row..(cb * CB + rows) * g_row]);
                            weight_grad(
                                &tail, g_row, g.maxoff, &padded, g.in_row, g.cin, &g.offs, g.nj,
                                &mut part,
                            );
                        }
                        let dst = &mut dw[cb * CB * g.cin * nk..(cb * CB + rows) * g.cin * nk];
                        dst.copy_from_slice(&part[..rows * g.cin * nk]);
                    }
                    dw
                });
                PerSample { dx, dw }
            })
            .collect();

        let dx = need_x.then(|| {
            let mut data = Vec::with_capacity(x.len());
            for s in &per_sample {
                data.extend_from_slice(s.dx.as_ref().unwrap());
            }
            Tensor5::new(x.shape(), data).unwrap()
        });
        let dw = need_w.then(|| {
            let mut acc = Tensor5::zeros(w.shape());
            for s in &per_sample {
                for (a, &v) in acc.data_mut().iter_mut().zip(s.dw.as_ref().unwrap()) {
                    *a += v;
                }
            }
            acc
        });
        let db = need_b.then(|| {
            let mut db = Tensor5::zeros(b.shape());
            for ni in 0..n {
                let gn = grad.sample(ni);
                for co in 0..g.cout {
                    let mut s = T::zero();
                    for &v in &gn[co * out_plane..(co + 1) * out_plane] {
                        s += v;
                    }
                    db.data_mut()[co] += s;
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}
