use ddn_core::tensor::{grad_check, BatchNormMode, Graph, NodeId, Op, Padding, Tensor5};
use ddn_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `sum(x * r)` for a fixed random `r`, so every output coordinate gets a
/// distinct upstream gradient.
struct Probe {
    r: Vec<f64>,
}

impl Op<f64> for Probe {
    fn name(&self) -> &'static str {
        "probe"
    }
    fn forward(&mut self, inputs: &[&Tensor5<f64>]) -> Result<Tensor5<f64>> {
        let s = inputs[0].data().iter().zip(&self.r).map(|(a, b)| a * b).sum();
        Ok(Tensor5::scalar(s))
    }
    fn backward(
        &self,
        inputs: &[&Tensor5<f64>],
        _output: &Tensor5<f64>,
        grad: &Tensor5<f64>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor5<f64>>> {
        let g = grad.item();
        let data = self.r.iter().map(|v| v * g).collect();
        vec![Some(Tensor5::new(inputs[0].shape(), data).unwrap())]
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5], scale: f64) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn probe(g: &mut Graph<f64>, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let n = g.value(x).len();
    let r = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.apply(Probe { r }, &[x]).unwrap()
}

fn conv_graph(
    seed: u64,
    xs: [usize; 5],
    cout: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> (Graph<f64>, NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, xs, 1.0));
    let w = g.param("w", rand_tensor(&mut rng, [cout, xs[1], k, k, k], 0.5));
    let b = g.param("b", rand_tensor(&mut rng, [1, cout, 1, 1, 1], 0.5));
    let y = g.conv3d(x, w, b, stride, padding).unwrap();
    let l = probe(&mut g, y, &mut rng);
    (g, l)
}

#[test]
fn conv_identity_kernel_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = Tensor5::<f32>::from_fn([2, 1, 5, 4, 3], |_| rng.gen_range(-3.0..3.0));
    let mut g = Graph::new();
    let x = g.input(xt.clone());
    let w = g.input(Tensor5::filled([1, 1, 1, 1, 1], 1.0));
    let b = g.input(Tensor5::zeros([1, 1, 1, 1, 1]));
    let y = g.conv3d(x, w, b, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv_box_sum_interior_is_27() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor5::filled([1, 1, 5, 5, 5], 1.0));
    let w = g.input(Tensor5::filled([1, 1, 3, 3, 3], 1.0));
    let b = g.input(Tensor5::zeros([1, 1, 1, 1, 1]));
    let y = g.conv3d(x, w, b, 1, Padding::Valid).unwrap();
    assert_eq!(g.value(y).shape(), [1, 1, 3, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 27.0));
}

#[test]
fn conv_same_padding_output_is_ceil_of_input_over_stride() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor5::filled([1, 2, 7, 6, 5], 1.0));
    let w = g.input(Tensor5::filled([3, 2, 3, 3, 3], 1.0));
    let b = g.input(Tensor5::zeros([1, 3, 1, 1, 1]));
    let y = g.conv3d(x, w, b, 2, Padding::Same).unwrap();
    assert_eq!(g.value(y).shape(), [1, 3, 4, 3, 3]);
}

#[test]
fn conv_rejects_mismatched_channels_and_even_same_kernel() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor5::zeros([1, 2, 4, 4, 4]));
    let w = g.input(Tensor5::zeros([1, 3, 3, 3, 3]));
    let b = g.input(Tensor5::zeros([1, 1, 1, 1, 1]));
    assert!(g.conv3d(x, w, b, 1, Padding::Same).is_err());
    let w2 = g.input(Tensor5::zeros([1, 2, 2, 2, 2]));
    assert!(g.conv3d(x, w2, b, 1, Padding::Same).is_err());
}

#[test]
fn conv_matches_direct_loops_on_spec_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&mut rng, [1, 2, 4, 4, 4], 1.0);
    let wt = rand_tensor(&mut rng, [3, 2, 3, 3, 3], 1.0);
    let bt = Tensor5::zeros([1, 3, 1, 1, 1]);
    for (padding, same) in [(Padding::Same, true), (Padding::Valid, false)] {
        let mut g = Graph::new();
        let (x, w, b) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
        let y = g.conv3d(x, w, b, 1, padding).unwrap();
        let (want, shape) =
            ddn_testkit::conv3d(xt.data(), xt.shape(), wt.data(), wt.shape(), bt.data(), 1, same);
        assert_eq!(g.value(y).shape(), shape);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(), n in 1usize..3, cin in 1usize..4, cout in 1usize..11,
        d in 3usize..7, h in 3usize..7, w in 3usize..7, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, same in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&mut rng, [n, cin, d, h, w], 1.0);
        let wt = rand_tensor(&mut rng, [cout, cin, k, k, k], 1.0);
        let bt = rand_tensor(&mut rng, [1, cout, 1, 1, 1], 1.0);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let mut g = Graph::new();
        let (x, wn, b) = (g.input(xt.clone()), g.input(wt.clone()), g.input(bt.clone()));
        let y = g.conv3d(x, wn, b, stride, padding).unwrap();
        let (want, shape) = ddn_testkit::conv3d(xt.data(), xt.shape(), wt.data(), wt.shape(), bt.data(), stride, same);
        prop_assert_eq!(g.value(y).shape(), shape);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
        // The f32 path goes through the same kernel.
        let mut g32 = Graph::<f32>::new();
        let (x, wn, b) = (g32.input(xt.cast()), g32.input(wt.cast()), g32.input(bt.cast()));
        let y = g32.conv3d(x, wn, b, stride, padding).unwrap();
        for (a, b) in g32.value(y).data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xa = rand_tensor(&mut rng, [1, 2, 5, 4, 6], 1.0);
        let xb = rand_tensor(&mut rng, [1, 2, 5, 4, 6], 1.0);
        let wt = rand_tensor(&mut rng, [3, 2, 3, 3, 3], 1.0);
        let run = |xt: Tensor5<f64>| {
            let mut g = Graph::new();
            let x = g.input(xt);
            let w = g.input(wt.clone());
            let b = g.input(Tensor5::zeros([1, 3, 1, 1, 1]));
            let y = g.conv3d(x, w, b, 1, Padding::Same).unwrap();
            g.value(y).clone()
        };
        let mix = Tensor5::new(xa.shape(), xa.data().iter().zip(xb.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let (ya, yb, ym) = (run(xa), run(xb), run(mix));
        for i in 0..ym.len() {
            prop_assert!((ym.data()[i] - (alpha * ya.data()[i] + beta * yb.data()[i])).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let cases = [
        ([2, 3, 6, 5, 4], 4, 3, 1, Padding::Same),
        ([1, 2, 6, 6, 6], 9, 3, 1, Padding::Valid),
        ([2, 4, 6, 6, 6], 3, 3, 2, Padding::Same),
        ([1, 3, 5, 6, 4], 2, 1, 1, Padding::Same),
        ([1, 2, 6, 6, 5], 3, 3, 2, Padding::Valid),
    ];
    for (i, (xs, cout, k, s, p)) in cases.into_iter().enumerate() {
        let (mut g, l) = conv_graph(i as u64, xs, cout, k, s, p);
        let r = grad_check(&mut g, l, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "case {i}: {r:?}");
    }
}

#[test]
fn batch_norm_train_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor5::from_fn([2, 3, 4, 4, 4], |i| {
        3.0 * (i / 64 % 3) as f64 + rng.gen_range(-2.0..2.0)
    }));
    let gamma = g.input(Tensor5::filled([1, 3, 1, 1, 1], 1.0));
    let beta = g.input(Tensor5::zeros([1, 3, 1, 1, 1]));
    let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: 1e-5 }).unwrap();
    assert!(stats.is_some());
    let yv = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| yv.channel(n, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
    // Affine on top of normalized input.
    let g2 = g.input(Tensor5::filled([1, 3, 1, 1, 1], 2.0));
    let b2 = g.input(Tensor5::filled([1, 3, 1, 1, 1], 3.0));
    let (z, _) = g.batch_norm(y, g2, b2, BatchNormMode::Train { eps: 0.0 }).unwrap();
    let zv: Vec<f64> = g.value(z).channel(0, 1).to_vec();
    let zv2: Vec<f64> = g.value(z).channel(1, 1).to_vec();
    let all: Vec<f64> = zv.into_iter().chain(zv2).collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let sd = (all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    assert!((m - 3.0).abs() < 1e-9 && (sd - 2.0).abs() < 1e-4);
}

#[test]
fn batch_norm_infer_with_unit_stats_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = rand_tensor(&mut rng, [1, 2, 3, 3, 3], 2.0);
    let mut g = Graph::<f64>::new();
    let x = g.input(xt.clone());
    let gamma = g.input(Tensor5::filled([1, 2, 1, 1, 1], 1.0));
    let beta = g.input(Tensor5::zeros([1, 2, 1, 1, 1]));
    let mode = BatchNormMode::Infer { mean: vec![0.0; 2], var: vec![1.0; 2], eps: 0.0 };
    let (y, stats) = g.batch_norm(x, gamma, beta, mode).unwrap();
    assert!(stats.is_none());
    assert!(g.value(y).max_abs_diff(&xt) < 1e-15);
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for (seed, mode) in [
        (7, BatchNormMode::Train { eps: 1e-5 }),
        (8, BatchNormMode::Infer { mean: vec![0.3, -0.2, 0.1], var: vec![0.5, 2.0, 1.2], eps: 1e-5 }),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.param("x", rand_tensor(&mut rng, [2, 3, 4, 3, 5], 1.5));
        let gamma = g.param("gamma", rand_tensor(&mut rng, [1, 3, 1, 1, 1], 2.0));
        let beta = g.param("beta", rand_tensor(&mut rng, [1, 3, 1, 1, 1], 1.0));
        let (y, _) = g.batch_norm(x, gamma, beta, mode).unwrap();
        let l = probe(&mut g, y, &mut rng);
        let r = grad_check(&mut g, l, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn leaky_relu_values_and_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor5::new([1, 1, 1, 1, 3], vec![2.0, -2.0, 0.5]).unwrap());
    let y = g.leaky_relu(x, 0.2).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -0.4, 0.5]);
    let id = g.leaky_relu(x, 1.0).unwrap();
    assert_eq!(g.value(id).data(), g.value(x).data());

    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor5::filled([1, 2, 2, 2, 2], -0.7));
    let y = g.leaky_relu(x, 0.2).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    // Inputs kept away from the kink.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.param(
        "x",
        Tensor5::from_fn([2, 3, 4, 4, 4], |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        }),
    );
    let y = g.leaky_relu(x, 0.2).unwrap();
    let l = probe(&mut g, y, &mut rng);
    assert!(grad_check(&mut g, l, 1e-3).unwrap().max_rel_error < 1e-4);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor5::filled([1, 2, 3, 2, 2], 0.3));
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor5::filled([1, 2, 3, 2, 2], 0.3));
    assert!(g.backward(x).is_err());
}

#[test]
fn concat_layout_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let a = g.param("a", rand_tensor(&mut rng, [2, 2, 3, 3, 3], 1.0));
    let b = g.param("b", rand_tensor(&mut rng, [2, 3, 3, 3, 3], 1.0));
    assert_eq!(g.concat_channels(&[a]).unwrap(), a);
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(c).shape(), [2, 5, 3, 3, 3]);
    for n in 0..2 {
        assert_eq!(g.value(c).channel(n, 1), g.value(a).channel(n, 1));
        assert_eq!(g.value(c).channel(n, 4), g.value(b).channel(n, 2));
    }
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    let l = probe(&mut g, c, &mut rng);
    assert!(grad_check(&mut g, l, 1e-3).unwrap().max_rel_error < 1e-4);

    let d = g.param("d", Tensor5::zeros([2, 1, 3, 3, 2]));
    assert!(g.concat_channels(&[a, d]).is_err());
}

#[test]
fn avg_pool_values_and_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor5::from_fn([1, 1, 2, 2, 2], |i| i as f64));
    let y = g.avg_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);
    let c = g.input(Tensor5::filled([2, 2, 4, 6, 4], 0.7));
    let p = g.avg_pool2(c).unwrap();
    assert_eq!(g.value(p).shape(), [2, 2, 2, 3, 2]);
    assert!(g.value(p).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.125));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, [2, 3, 5, 6, 4], 1.0));
    let y = g.avg_pool2(x).unwrap();
    assert_eq!(g.value(y).shape(), [2, 3, 2, 3, 2]);
    let l = probe(&mut g, y, &mut rng);
    assert!(grad_check(&mut g, l, 1e-3).unwrap().max_rel_error < 1e-4);
}

#[test]
fn upsample_preserves_constants_and_ramps() {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor5::filled([1, 2, 3, 2, 4], 1.25));
    let u = g.upsample_trilinear(c, 2).unwrap();
    assert_eq!(g.value(u).shape(), [1, 2, 6, 4, 8]);
    assert!(g.value(u).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));

    let (d, h, w) = (3, 4, 5);
    let ramp = g.input(Tensor5::from_fn([1, 1, d, h, w], |i| 0.3 * (i % w) as f64 - 0.1));
    let u = g.upsample_trilinear(ramp, 2).unwrap();
    let uv = g.value(u);
    for (i, v) in uv.data().iter().enumerate() {
        let ox = (i % (2 * w)) as f64;
        let src = ox * (w - 1) as f64 / (2 * w - 1) as f64;
        assert!((v - (0.3 * src - 0.1)).abs() < 1e-6);
    }
}

/// Uniform noise blurred by a separable Gaussian (sigma 2), cropped away
/// from the clamped borders.
fn blurred_noise(seed: u64, inner: usize) -> Vec<f64> {
    let s = inner + 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..s * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
    let taps: Vec<f64> = (-6i32..=6).map(|t| (-(t * t) as f64 / 8.0).exp()).collect();
    let norm: f64 = taps.iter().sum();
    for stride in [1, s, s * s] {
        let mut out = vec![0.0; v.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = (i / stride % s) as i32;
            for (t, w) in (-6i32..=6).zip(&taps) {
                let q = (pos + t).clamp(0, s as i32 - 1);
                *o += w * v[(i as i32 + (q - pos) * stride as i32) as usize];
            }
            *o /= norm;
        }
        v = out;
    }
    let mut crop = Vec::with_capacity(inner * inner * inner);
    for z in 6..6 + inner {
        for y in 6..6 + inner {
            crop.extend_from_slice(&v[(z * s + y) * s + 6..(z * s + y) * s + 6 + inner]);
        }
    }
    crop
}

#[test]
fn upsample_then_pool_roughly_recovers_smooth_input() {
    let s = 12;
    for seed in 0..5 {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor5::new([1, 1, s, s, s], blurred_noise(seed, s)).unwrap());
        let u = g.upsample_trilinear(x, 2).unwrap();
        let p = g.avg_pool2(u).unwrap();
        let e = g.value(p).max_abs_diff(g.value(x));
        assert!(e < 1e-2, "seed {seed}: {e}");
    }
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, [2, 3, 3, 2, 3], 1.0));
    let y = g.upsample_trilinear(x, 2).unwrap();
    let l = probe(&mut g, y, &mut rng);
    assert!(grad_check(&mut g, l, 1e-3).unwrap().max_rel_error < 1e-4);
}

#[test]
fn scale_add_narrow_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let a = g.param("a", rand_tensor(&mut rng, [1, 4, 3, 3, 3], 1.0));
    let b = g.param("b", rand_tensor(&mut rng, [1, 2, 3, 3, 3], 1.0));
    let s = g.scale(a, -1.5).unwrap();
    let n = g.narrow_channels(s, 1, 2).unwrap();
    let y = g.add(n, b).unwrap();
    let l = probe(&mut g, y, &mut rng);
    assert!(grad_check(&mut g, l, 1e-3).unwrap().max_rel_error < 1e-4);
    assert_eq!(g.value(n).channel(0, 0), g.value(s).channel(0, 1));
}

#[test]
fn non_finite_forward_is_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor5::filled([1, 1, 1, 1, 2], f32::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(ddn_core::DdnError::Numeric(_))));
}
