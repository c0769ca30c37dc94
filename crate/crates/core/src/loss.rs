//! Training objective: negative squared cross-correlation plus a diffusion
//! penalty on the flow.

use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::tensor::{Graph, NodeId, Op, Real, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the smoothness term.
    pub lambda_smooth: f64,
    /// Edge length of the cubic correlation window (odd).
    pub cc_window: usize,
    /// Floor added to the variance product.
    pub eps: f64,
    /// Correlate whole patches instead of local windows.
    #[serde(default)]
    pub global_cc: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_smooth: 1.0,
            cc_window: 9,
            eps: 1e-5,
            global_cc: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(DdnError::config(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            )));
        }
        if self.cc_window < 3 || self.cc_window % 2 == 0 {
            return Err(DdnError::config(format!(
                "cc_window must be odd and >= 3, got {}",
                self.cc_window
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(DdnError::config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    fn window(&self) -> Window {
        if self.global_cc {
            Window::Global
        } else {
            Window::Local(self.cc_window)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    /// Cubic window of the given odd edge length, clipped at the borders.
    Local(usize),
    /// The whole patch.
    Global,
}

/// Window sums of a `[D, H, W]` grid. The operator is symmetric, so it is also
/// its own adjoint.
fn box_sum(v: &[f64], dims: [usize; 3], window: Window) -> Vec<f64> {
    match window {
        Window::Global => vec![v.iter().sum(); v.len()],
        Window::Local(win) => {
            let r = win / 2;
            let [_, h, w] = dims;
            let strides = [h * w, w, 1];
            let mut cur = v.to_vec();
            let mut prefix = Vec::new();
            for axis in 0..3 {
                let (n, st) = (dims[axis], strides[axis]);
                let mut next = vec![0.0; cur.len()];
                let lines = cur.len() / n;
                for line in 0..lines {
                    // Base index of this line: decompose `line` over the other axes.
                    let base = match axis {
                        0 => line,
                        1 => (line / w) * h * w + line % w,
                        _ => line * w,
                    };
                    prefix.clear();
                    prefix.push(0.0);
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += cur[base + i * st];
                        prefix.push(acc);
                    }
                    for i in 0..n {
                        let lo = i.saturating_sub(r);
                        let hi = (i + r + 1).min(n);
                        next[base + i * st] = prefix[hi] - prefix[lo];
                    }
                }
                cur = next;
            }
            cur
        }
    }
}

struct Ncc {
    window: Window,
    eps: f64,
}

/// Number of in-grid voxels in the window around each voxel.
fn window_counts(dims: [usize; 3], window: Window) -> Vec<f64> {
    let pl = dims[0] * dims[1] * dims[2];
    match window {
        Window::Global => vec![pl as f64; pl],
        Window::Local(win) => {
            let r = win / 2;
            let per_axis = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|i| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64)
                    .collect()
            };
            let [cz, cy, cx] = [per_axis(dims[0]), per_axis(dims[1]), per_axis(dims[2])];
            let mut out = Vec::with_capacity(pl);
            for z in &cz {
                for y in &cy {
                    for x in &cx {
                        out.push(z * y * x);
                    }
                }
            }
            out
        }
    }
}

/// Window statistics of one sample.
struct Moments {
    i: Vec<f64>,
    j: Vec<f64>,
    i2: Vec<f64>,
    j2: Vec<f64>,
    ij: Vec<f64>,
}

impl Moments {
    fn new(a: &[f64], b: &[f64], dims: [usize; 3], window: Window) -> Self {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        Moments {
            i: box_sum(a, dims, window),
            j: box_sum(b, dims, window),
            i2: box_sum(&sq(a), dims, window),
            j2: box_sum(&sq(b), dims, window),
            ij: box_sum(&ab, dims, window),
        }
    }

    /// Centered cross term and variances at voxel `k`.
    #[inline]
    fn centered(&self, k: usize, n: f64) -> (f64, f64, f64) {
        let cross = self.ij[k] - self.i[k] * self.j[k] / n;
        let iv = (self.i2[k] - self.i[k] * self.i[k] / n).max(0.0);
        let jv = (self.j2[k] - self.j[k] * self.j[k] / n).max(0.0);
        (cross, iv, jv)
    }
}

fn as_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

impl<T: Real> Op<T> for Ncc {
    fn name(&self) -> &'static str {
        "ncc_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() || a.c() != 1 {
            return Err(DdnError::shape(format!(
                "ncc_loss needs equal single-channel inputs, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let dims = a.spatial();
        let pl = a.plane_len();
        let counts = window_counts(dims, self.window);
        let mut total = 0.0;
        for ni in 0..a.n() {
            let m = Moments::new(&as_f64(a.channel(ni, 0)), &as_f64(b.channel(ni, 0)), dims, self.window);
            for k in 0..pl {
                let (cross, iv, jv) = m.centered(k, counts[k]);
                total += cross * cross / (iv * jv + self.eps);
            }
        }
        Ok(Tensor5::scalar(T::of(-total / (a.n() * pl) as f64)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let dims = a.spatial();
        let pl = a.plane_len();
        let counts = window_counts(dims, self.window);
        let s = -grad.item().f64() / (a.n() * pl) as f64;
        let mut da = needs[0].then(|| Tensor5::zeros(a.shape()));
        let mut db = needs[1].then(|| Tensor5::zeros(b.shape()));
        for ni in 0..a.n() {
            let av = as_f64(a.channel(ni, 0));
            let bv = as_f64(b.channel(ni, 0));
            let m = Moments::new(&av, &bv, dims, self.window);
            let mut gi = vec![0.0; pl];
            let mut gj = vec![0.0; pl];
            let mut gi2 = vec![0.0; pl];
            let mut gj2 = vec![0.0; pl];
            let mut gij = vec![0.0; pl];
            for k in 0..pl {
                let n = counts[k];
                let (cross, iv, jv) = m.centered(k, n);
                let den = iv * jv + self.eps;
                let c2 = cross * cross / (den * den);
                let dcross = 2.0 * cross / den;
                let (ci, cj) = (m.i[k], m.j[k]);
                gij[k] = s * dcross;
                gi2[k] = -s * c2 * jv;
                gj2[k] = -s * c2 * iv;
                gi[k] = s * (-dcross * cj / n + c2 * jv * 2.0 * ci / n);
                gj[k] = s * (-dcross * ci / n + c2 * iv * 2.0 * cj / n);
            }
            let (bi, bj) = (box_sum(&gi, dims, self.window), box_sum(&gj, dims, self.window));
            let (bi2, bj2) = (box_sum(&gi2, dims, self.window), box_sum(&gj2, dims, self.window));
            let bij = box_sum(&gij, dims, self.window);
            if let Some(t) = da.as_mut() {
                for (k, dst) in t.channel_mut(ni, 0).iter_mut().enumerate() {
                    *dst = T::of(bi[k] + 2.0 * av[k] * bi2[k] + bv[k] * bij[k]);
                }
            }
            if let Some(t) = db.as_mut() {
                for (k, dst) in t.channel_mut(ni, 0).iter_mut().enumerate() {
                    *dst = T::of(bj[k] + 2.0 * bv[k] * bj2[k] + av[k] * bij[k]);
                }
            }
        }
        vec![da, db]
    }
}

struct Diffusion;

impl<T: Real> Op<T> for Diffusion {
    fn name(&self) -> &'static str {
        "diffusion_reg"
    }

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
        let f = inputs[0];
        let [n, c, d, h, w] = f.shape();
        let mut s = 0.0;
        for ni in 0..n {
            for ch in 0..c {
                let v = f.channel(ni, ch);
                for_each_difference([d, h, w], |i, j| {
                    let diff = v[j].f64() - v[i].f64();
                    s += diff * diff;
                });
            }
        }
        Ok(Tensor5::scalar(T::of(s / f.len() as f64)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        _output: &Tensor5<T>,
        grad: &Tensor5<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>> {
        let f = inputs[0];
        let [n, c, d, h, w] = f.shape();
        let k = 2.0 * grad.item().f64() / f.len() as f64;
        let mut out = Tensor5::zeros(f.shape());
        for ni in 0..n {
            for ch in 0..c {
                let v = f.channel(ni, ch);
                let mut acc = vec![0.0f64; v.len()];
                for_each_difference([d, h, w], |i, j| {
                    let diff = v[j].f64() - v[i].f64();
                    acc[j] += k * diff;
                    acc[i] -= k * diff;
                });
                for (dst, a) in out.channel_mut(ni, ch).iter_mut().zip(acc) {
                    *dst = T::of(a);
                }
            }
        }
        vec![Some(out)]
    }
}

/// Calls `f(i, j)` for every forward-difference pair (`j` one step after `i`
/// along some axis) in a `[D, H, W]` grid.
#[inline]
fn for_each_difference(dims: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if x + 1 < w {
                    f(i, i + 1);
                }
                if y + 1 < h {
                    f(i, i + w);
                }
                if z + 1 < d {
                    f(i, i + h * w);
                }
            }
        }
    }
}

/// Nodes of the assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub similarity: NodeId,
    pub smoothness: NodeId,
    pub total: NodeId,
}

impl<T: Real> Graph<T> {
    /// `-mean_p CC(p)` between two single-channel tensors.
    pub fn ncc_loss(&mut self, warped: NodeId, tgt: NodeId, window: Window, eps: f64) -> Result<NodeId> {
        if let Window::Local(w) = window {
            if w % 2 == 0 || w == 0 {
                return Err(DdnError::config(format!("window must be odd, got {w}")));
            }
        }
        self.apply(Ncc { window, eps }, &[warped, tgt])
    }

    /// Mean squared forward difference of every flow component.
    pub fn diffusion_reg(&mut self, flow: NodeId) -> Result<NodeId> {
        self.apply(Diffusion, &[flow])
    }

    /// `ncc(warp(src, flow), tgt) + lambda * diffusion(flow)`.
    pub fn total_loss(&mut self, src: NodeId, tgt: NodeId, flow: NodeId, cfg: &LossConfig) -> Result<LossNodes> {
        cfg.validate()?;
        let warped = self.warp_patch(src, flow)?;
        let similarity = self.ncc_loss(warped, tgt, cfg.window(), cfg.eps)?;
        let smoothness = self.diffusion_reg(flow)?;
        let weighted = self.scale(smoothness, cfg.lambda_smooth)?;
        let total = self.add(similarity, weighted)?;
        Ok(LossNodes {
            similarity,
            smoothness,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor5<f64> {
        Tensor5::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn ncc_value(a: &Tensor5<f64>, b: &Tensor5<f64>, window: Window) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.input(a.clone()), g.input(b.clone()));
        let l = g.ncc_loss(x, y, window, 1e-5).unwrap();
        g.value(l).item()
    }

    fn smooth(shape: [usize; 5], phase: f64) -> Tensor5<f64> {
        let [_, _, d, h, w] = shape;
        Tensor5::from_fn(shape, |i| {
            let (x, y, z) = ((i % w) as f64, (i / w % h) as f64, (i / (w * h) % d) as f64);
            0.5 + 0.3 * (0.7 * x + phase).sin() * (0.5 * y).cos() + 0.2 * (0.9 * z - phase).sin()
        })
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { cc_window: 4, ..Default::default() },
            LossConfig { cc_window: 1, ..Default::default() },
            LossConfig { lambda_smooth: -1.0, ..Default::default() },
            LossConfig { eps: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn perfect_and_anti_correlation_give_minus_one() {
        let a = smooth([1, 1, 12, 12, 12], 0.3);
        assert!((ncc_value(&a, &a, Window::Local(9)) + 1.0).abs() < 1e-4);
        let anti = a.map(|v| 1.0 - v);
        assert!((ncc_value(&a, &anti, Window::Local(9)) + 1.0).abs() < 1e-4);
        assert!((ncc_value(&a, &anti, Window::Global) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn matches_direct_window_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&mut rng, [1, 1, 9, 9, 9]);
        let b = rand_t(&mut rng, [1, 1, 9, 9, 9]);
        let want = ddn_testkit::ncc_loss(a.data(), b.data(), [9, 9, 9], 9, 1e-5);
        assert!((ncc_value(&a, &b, Window::Local(9)) - want).abs() < 1e-6);
    }

    #[test]
    fn box_sum_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [4, 5, 7];
        let v: Vec<f64> = (0..140).map(|_| rng.gen()).collect();
        let b = box_sum(&v, dims, Window::Local(3));
        for z in 0..4i32 {
            for y in 0..5i32 {
                for x in 0..7i32 {
                    let mut s = 0.0;
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                let (p, q, r) = (z + dz, y + dy, x + dx);
                                if (0..4).contains(&p) && (0..5).contains(&q) && (0..7).contains(&r) {
                                    s += v[((p * 5 + q) * 7 + r) as usize];
                                }
                            }
                        }
                    }
                    assert!((b[((z * 5 + y) * 7 + x) as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ncc_gradients_match_finite_differences() {
        for (seed, window, shape) in [
            (1, Window::Local(3), [2, 1, 5, 6, 4]),
            (2, Window::Local(5), [1, 1, 6, 6, 6]),
            (3, Window::Global, [2, 1, 4, 5, 3]),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = g.param("a", rand_t(&mut rng, shape));
            let b = g.param("b", rand_t(&mut rng, shape));
            let l = g.ncc_loss(a, b, window, 1e-5).unwrap();
            let r = grad_check(&mut g, l, 1e-4).unwrap();
            assert!(r.max_rel_error < 1e-4, "{window:?}: {r:?}");
        }
    }

    #[test]
    fn diffusion_values() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor5::filled([1, 3, 4, 4, 4], 2.5));
        let d = g.diffusion_reg(c).unwrap();
        assert_eq!(g.value(d).item(), 0.0);

        let shear = Tensor5::from_fn([1, 3, 4, 4, 4], |i| if i < 64 { (i % 4) as f64 } else { 0.0 });
        let comps = [shear.channel(0, 0).to_vec(), shear.channel(0, 1).to_vec(), shear.channel(0, 2).to_vec()];
        let want = ddn_testkit::diffusion(&comps, [4, 4, 4]);
        let s = g.input(shear.clone());
        let d = g.diffusion_reg(s).unwrap();
        assert_eq!(g.value(d).item(), want);
        assert_eq!(want, 0.25);

        let doubled = g.input(shear.map(|v| 3.0 * v));
        let d3 = g.diffusion_reg(doubled).unwrap();
        assert!((g.value(d3).item() - 9.0 * want).abs() < 1e-12);
    }

    #[test]
    fn diffusion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let f = g.param("f", Tensor5::from_fn([2, 3, 4, 5, 3], |_| rng.gen_range(-2.0..2.0)));
        let d = g.diffusion_reg(f).unwrap();
        let r = grad_check(&mut g, d, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn total_loss_composition() {
        let a = smooth([1, 1, 10, 10, 10], 0.1);
        let mut g = Graph::<f64>::new();
        let s = g.input(a.clone());
        let t = g.input(a.clone());
        let f = g.input(Tensor5::zeros([1, 3, 10, 10, 10]));
        let nodes = g.total_loss(s, t, f, &LossConfig::default()).unwrap();
        assert!((g.value(nodes.total).item() + 1.0).abs() < 1e-4);
        assert_eq!(g.value(nodes.smoothness).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flow = Tensor5::from_fn([1, 3, 10, 10, 10], |_| rng.gen_range(-0.8..0.8));
        let b = smooth([1, 1, 10, 10, 10], 0.9);
        let totals: Vec<f64> = [0.0, 0.5, 2.0]
            .iter()
            .map(|&lambda| {
                let mut g = Graph::<f64>::new();
                let s = g.input(a.clone());
                let t = g.input(b.clone());
                let f = g.input(flow.clone());
                let cfg = LossConfig { lambda_smooth: lambda, ..Default::default() };
                let nodes = g.total_loss(s, t, f, &cfg).unwrap();
                if lambda == 0.0 {
                    assert_eq!(g.value(nodes.total).item(), g.value(nodes.similarity).item());
                }
                g.value(nodes.total).item()
            })
            .collect();
        assert!(totals[0] <= totals[1] && totals[1] <= totals[2]);
    }

    #[test]
    fn total_loss_gradients_on_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = [1, 1, 8, 8, 8];
        let mut g = Graph::new();
        let s = g.input(smooth(shape, 0.2));
        let t = g.input(smooth(shape, 0.7));
        let f = g.param(
            "flow",
            Tensor5::from_fn([1, 3, 8, 8, 8], |_| 0.3 + rng.gen_range(-0.15..0.15)),
        );
        let cfg = LossConfig { cc_window: 5, ..Default::default() };
        let nodes = g.total_loss(s, t, f, &cfg).unwrap();
        let r = grad_check(&mut g, nodes.total, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn ncc_bounds_and_affine_invariance(
            seed in any::<u64>(), alpha in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0], beta in -2.0f64..2.0,
            w in prop::sample::select(vec![3usize, 5, 9]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [1, 1, 7, 6, 8];
            let a = rand_t(&mut rng, shape);
            let b = rand_t(&mut rng, shape);
            let l = ncc_value(&a, &b, Window::Local(w));
            prop_assert!((-1.0..=0.0).contains(&l));
            let l2 = ncc_value(&a, &b.map(|v| alpha * v + beta), Window::Local(w));
            prop_assert!((l2 - l).abs() < 1e-5, "{} vs {}", l2, l);
            let l3 = ncc_value(&a.map(|v| alpha * v + beta), &b, Window::Local(w));
            prop_assert!((l3 - l).abs() < 1e-5);
        }

        #[test]
        fn diffusion_nonnegative_and_zero_only_when_constant(seed in any::<u64>(), c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let f = g.input(Tensor5::from_fn([1, 3, 3, 4, 5], |_| rng.gen_range(-1.0..1.0)));
            let d = g.diffusion_reg(f).unwrap();
            prop_assert!(g.value(d).item() > 0.0);
            let k = g.input(Tensor5::filled([1, 3, 3, 4, 5], c));
            let dk = g.diffusion_reg(k).unwrap();
            prop_assert_eq!(g.value(dk).item(), 0.0);
        }
    }
}
