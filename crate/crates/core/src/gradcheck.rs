//! Finite-difference verification of every differentiable operation and of
//! the assembled network objective, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DdnError, Result};
use crate::loss::{LossConfig, Window};
use crate::model::{build_ddn, DdnConfig, Mode};
use crate::tensor::{grad_check, BatchNormMode, Graph, NodeId, Padding, Tensor5};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the loss through warp and the full network.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Step reduction for the network check. Leaky activations and trilinear
/// sampling are piecewise smooth, and a full-size step moves enough
/// pre-activations across a kink to spoil central differences.
pub const EPS_SCALE_NETWORK: f64 = 1e-3;
/// Step reduction for the correlation loss, a ratio of small-window moments
/// whose third derivatives make the O(eps^2) truncation error of central
/// differences reach 1e-3 relative at eps = 1e-3.
pub const EPS_SCALE_NCC: f64 = 1e-1;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub shape: [usize; 5],
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    /// Finite-difference step actually used.
    pub eps: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 5], lo: f64, hi: f64) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in [0.1, 1] and random sign, so that a small
/// perturbation never crosses the origin.
fn off_zero(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Displacements whose fractional part stays in [0.15, 0.85], keeping
/// sample points away from lattice planes where interpolation has kinks.
fn off_lattice(rng: &mut ChaCha8Rng, shape: [usize; 5], reach: i32) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| rng.gen_range(-reach..reach) as f64 + rng.gen_range(0.15..0.85))
}

/// `sum(x * r)` for a fixed random `r`.
fn probe(g: &mut Graph<f64>, x: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let r = uniform(rng, g.value(x).shape(), -1.0, 1.0);
    let r = g.input(r);
    let m = g.mul(x, r)?;
    g.sum(m)
}

struct Case {
    name: &'static str,
    tolerance: f64,
    /// Multiplies the requested step.
    eps_scale: f64,
    build: fn(&mut Graph<f64>, &mut ChaCha8Rng, usize) -> Result<(NodeId, [usize; 5])>,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv3d",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let shape = [2, 3, s, s, s];
                let x = g.param("x", uniform(rng, shape, -1.0, 1.0));
                let w = g.param("w", uniform(rng, [4, 3, 3, 3, 3], -0.5, 0.5));
                let b = g.param("b", uniform(rng, [1, 4, 1, 1, 1], -0.5, 0.5));
                let stride = rng.gen_range(1..=2);
                let padding = if rng.gen() { Padding::Same } else { Padding::Valid };
                let y = g.conv3d(x, w, b, stride, padding)?;
                Ok((probe(g, y, rng)?, shape))
            },
        },
        Case {
            name: "batch_norm",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let shape = [2, 4, s, s, s];
                let x = g.param("x", uniform(rng, shape, -1.0, 2.0));
                let gamma = g.param("gamma", uniform(rng, [1, 4, 1, 1, 1], 0.5, 1.5));
                let beta = g.param("beta", uniform(rng, [1, 4, 1, 1, 1], -0.5, 0.5));
                let (y, _) = g.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: 1e-5 })?;
                Ok((probe(g, y, rng)?, shape))
            },
        },
        Case {
            name: "leaky_relu",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let shape = [2, 4, s, s, s];
                let x = g.param("x", off_zero(rng, shape));
                let y = g.leaky_relu(x, 0.2)?;
                Ok((probe(g, y, rng)?, shape))
            },
        },
        Case {
            name: "avg_pool",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let shape = [2, 4, s, s, s];
                let x = g.param("x", uniform(rng, shape, -1.0, 1.0));
                let y = g.avg_pool2(x)?;
                Ok((probe(g, y, rng)?, shape))
            },
        },
        Case {
            name: "upsample",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let shape = [2, 4, s / 2, s / 2, s / 2];
                let x = g.param("x", uniform(rng, shape, -1.0, 1.0));
                let y = g.upsample_trilinear(x, 2)?;
                Ok((probe(g, y, rng)?, shape))
            },
        },
        Case {
            name: "warp_patch",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let src = g.param("src", uniform(rng, [2, 1, s, s, s], 0.0, 1.0));
                let flow = g.param("flow", off_lattice(rng, [2, 3, s, s, s], 1));
                let y = g.warp_patch(src, flow)?;
                Ok((probe(g, y, rng)?, [2, 3, s, s, s]))
            },
        },
        Case {
            name: "ncc_loss",
            tolerance: OP_TOLERANCE,
            eps_scale: EPS_SCALE_NCC,
            build: |g, rng, s| {
                let shape = [2, 1, s, s, s];
                let a = g.param("a", uniform(rng, shape, 0.0, 1.0));
                let b = g.param("b", uniform(rng, shape, 0.0, 1.0));
                Ok((g.ncc_loss(a, b, Window::Local(3), 1e-5)?, shape))
            },
        },
        Case {
            name: "diffusion_reg",
            tolerance: OP_TOLERANCE,
            eps_scale: 1.0,
            build: |g, rng, s| {
                let shape = [2, 3, s, s, s];
                let f = g.param("flow", uniform(rng, shape, -2.0, 2.0));
                Ok((g.diffusion_reg(f)?, shape))
            },
        },
        Case {
            name: "total_loss",
            tolerance: COMPOSITE_TOLERANCE,
            eps_scale: EPS_SCALE_NCC,
            build: |g, rng, s| {
                let shape = [2, 1, s, s, s];
                let src = g.param("src", uniform(rng, shape, 0.0, 1.0));
                let tgt = g.param("tgt", uniform(rng, shape, 0.0, 1.0));
                let flow = g.param("flow", off_lattice(rng, [2, 3, s, s, s], 1));
                let cfg = LossConfig {
                    cc_window: 3,
                    lambda_smooth: 0.5,
                    ..Default::default()
                };
                Ok((g.total_loss(src, tgt, flow, &cfg)?.total, [2, 3, s, s, s]))
            },
        },
        Case {
            name: "ddn_forward",
            tolerance: COMPOSITE_TOLERANCE,
            eps_scale: EPS_SCALE_NETWORK,
            build: |g, rng, _| {
                let cfg = DdnConfig {
                    patch_size: 8,
                    units_per_block: 2,
                    growth: 2,
                    base_channels: 4,
                    ..Default::default()
                };
                let mut model = build_ddn(&cfg, rng.gen())?;
                // Zero heads would leave most gradients identically zero.
                for name in ["global.w", "local.w", "fusion.w"] {
                    let shape = model.param(name).expect("head exists").tensor.shape();
                    let t = Tensor5::from_fn(shape, |_| rng.gen_range(-0.3f32..0.3));
                    model.set_param(name, t)?;
                }
                let shape = [1, 1, 8, 8, 8];
                let smooth = |rng: &mut ChaCha8Rng| {
                    let (a, b, c) = (rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.0..6.0));
                    Tensor5::from_fn(shape, move |i| {
                        let (x, y, z) = ((i % 8) as f64, (i / 8 % 8) as f64, (i / 64) as f64);
                        0.5 + 0.4 * (a * x + c).sin() * (b * y).cos() + 0.05 * z
                    })
                };
                let src = g.input(smooth(rng));
                let tgt = g.input(smooth(rng));
                let nodes = model.build_graph(g, src, tgt, Mode::Train)?;
                let loss_cfg = LossConfig {
                    cc_window: 3,
                    ..Default::default()
                };
                Ok((g.total_loss(src, tgt, nodes.fused, &loss_cfg)?.total, shape))
            },
        },
    ]
}

/// Runs every check on spatial extent `size` (even, 4..=6 keeps shapes
/// within 2x4x6x6x6; the network check always uses an 8^3 patch).
pub fn run_suite(size: usize, eps: f64, seed: u64) -> Result<Vec<CheckResult>> {
    if size < 2 || size % 2 != 0 {
        return Err(DdnError::config(format!("size must be even and >= 2, got {size}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DdnError::config(format!("eps must be in (0, 1), got {eps}")));
    }
    let mut out = Vec::new();
    for (k, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut g = Graph::<f64>::new();
        let (loss, shape) = (case.build)(&mut g, &mut rng, size)?;
        let rep = grad_check(&mut g, loss, eps * case.eps_scale)?;
        log::debug!("{}: {:?}", case.name, rep.worst);
        out.push(CheckResult {
            name: case.name,
            shape,
            max_rel_error: rep.max_rel_error,
            coordinates: rep.coordinates,
            tolerance: case.tolerance,
            eps: eps * case.eps_scale,
        });
    }
    Ok(out)
}
