//! The dense deformation network.
//!
//! ```text
//! concat(src, tgt) -> stem conv -> dense block 1 ---------> global head (1^3) --------------.
//!                                        |                                                  |
//!                                        '-> transition (1^3 conv, avg pool) -> dense block 2
//!                                                -> local head (1^3) -> upsample x2, values x2 -> concat -> fusion (k^3)
//! ```

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::tensor::{BatchNormMode, BatchStats, Graph, NodeId, Padding, Real, Tensor5};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdnConfig {
    pub patch_size: usize,
    pub units_per_block: usize,
    pub growth: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub base_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for DdnConfig {
    fn default() -> Self {
        DdnConfig {
            patch_size: 32,
            units_per_block: 4,
            growth: 8,
            kernel: 3,
            leaky_slope: 0.2,
            base_channels: 16,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl DdnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DdnError::config(m));
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            return fail(format!("patch_size must be even and >= 8, got {}", self.patch_size));
        }
        if self.units_per_block == 0 {
            return fail("units_per_block must be >= 1".into());
        }
        if self.kernel % 2 == 0 || self.kernel > self.patch_size / 2 {
            return fail(format!(
                "kernel must be odd and at most patch_size/2, got {}",
                self.kernel
            ));
        }
        if self.growth == 0 || self.base_channels == 0 {
            return fail("growth and base_channels must be >= 1".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return fail(format!("leaky_slope must be >= 0, got {}", self.leaky_slope));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum must be in [0, 1), got {}", self.bn_momentum));
        }
        if !(self.bn_eps > 0.0) {
            return fail(format!("bn_eps must be > 0, got {}", self.bn_eps));
        }
        Ok(())
    }

    /// Channels leaving dense block 1.
    pub fn block1_out(&self) -> usize {
        self.base_channels + self.units_per_block * self.growth
    }

    pub fn transition_out(&self) -> usize {
        (self.block1_out() / 2).max(1)
    }

    pub fn block2_out(&self) -> usize {
        self.transition_out() + self.units_per_block * self.growth
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let k3 = self.kernel.pow(3);
        let conv = |cin: usize, cout: usize, k3: usize| cin * cout * k3 + cout;
        let block = |cin: usize| -> usize {
            (0..self.units_per_block)
                .map(|u| {
                    let c = cin + u * self.growth;
                    2 * c + conv(c, self.growth, k3)
                })
                .sum()
        };
        conv(2, self.base_channels, k3)
            + block(self.base_channels)
            + conv(self.block1_out(), 3, 1)
            + conv(self.block1_out(), self.transition_out(), 1)
            + block(self.transition_out())
            + conv(self.block2_out(), 3, 1)
            + conv(6, 3, k3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor5<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are reported for update.
    Train,
    /// Running statistics.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdnModel {
    config: DdnConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Graph nodes produced by [`DdnModel::build_graph`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub global: NodeId,
    pub local: NodeId,
    pub fused: NodeId,
    /// Trainable parameter nodes by name.
    pub params: Vec<(String, NodeId)>,
    /// Batch statistics of every batch-norm layer (train mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// Flow outputs of one forward pass, each `[N, 3, D, H, W]`.
#[derive(Debug, Clone)]
pub struct FlowOutput<T> {
    pub global: Tensor5<T>,
    pub local: Tensor5<T>,
    pub fused: Tensor5<T>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor5<f32> {
    let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor5::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32)
}

/// Deterministically initialized network.
pub fn build_ddn(config: &DdnConfig, seed: u64) -> Result<DdnModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let k = config.kernel;
    let mut push = |name: String, tensor: Tensor5<f32>, trainable: bool| {
        params.push(Parameter {
            name,
            tensor,
            trainable,
        })
    };
    let bias = |c: usize| Tensor5::zeros([1, c, 1, 1, 1]);

    push("stem.w".into(), he_uniform(&mut rng, [config.base_channels, 2, k, k, k]), true);
    push("stem.b".into(), bias(config.base_channels), true);
    let mut dense = |block: usize, cin: usize, push: &mut dyn FnMut(String, Tensor5<f32>, bool)| {
        for u in 0..config.units_per_block {
            let c = cin + u * config.growth;
            let p = format!("b{block}.u{u}");
            push(format!("{p}.bn.gamma"), Tensor5::filled([1, c, 1, 1, 1], 1.0), true);
            push(format!("{p}.bn.beta"), bias(c), true);
            push(format!("{p}.bn.mean"), bias(c), false);
            push(format!("{p}.bn.var"), Tensor5::filled([1, c, 1, 1, 1], 1.0), false);
            push(format!("{p}.conv.w"), he_uniform(&mut rng, [config.growth, c, k, k, k]), true);
            push(format!("{p}.conv.b"), bias(config.growth), true);
        }
    };
    dense(1, config.base_channels, &mut push);
    let b1 = config.block1_out();
    push("global.w".into(), Tensor5::zeros([3, b1, 1, 1, 1]), true);
    push("global.b".into(), bias(3), true);
    // Separate stream for the transition; `dense` holds the main one.
    let t = config.transition_out();
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616e);
    push("trans.w".into(), he_uniform(&mut rng2, [t, b1, 1, 1, 1]), true);
    push("trans.b".into(), bias(t), true);
    dense(2, t, &mut push);
    push("local.w".into(), Tensor5::zeros([3, config.block2_out(), 1, 1, 1]), true);
    push("local.b".into(), bias(3), true);

    // Fusion starts as the sum of the two flows.
    let mut fw = Tensor5::zeros([3, 6, k, k, k]);
    let centre = (k * k * k) / 2;
    for co in 0..3 {
        for ci in [co, co + 3] {
            fw.data_mut()[(co * 6 + ci) * k * k * k + centre] = 1.0;
        }
    }
    push("fusion.w".into(), fw, true);
    push("fusion.b".into(), bias(3), true);

    DdnModel::from_params(config.clone(), params)
}

impl DdnModel {
    /// Assembles a model from named tensors, checking names and shapes
    /// against a freshly built model of the same config.
    pub fn from_params(config: DdnConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let mut index = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(DdnError::config(format!("duplicate parameter {}", p.name)));
            }
            if !p.tensor.is_finite() {
                return Err(DdnError::Numeric(format!("parameter {} is not finite", p.name)));
            }
        }
        Ok(DdnModel {
            config,
            params,
            index,
        })
    }

    pub fn config(&self) -> &DdnConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, tensor: Tensor5<f32>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| DdnError::config(format!("no parameter {name}")))?;
        if self.params[i].tensor.shape() != tensor.shape() {
            return Err(DdnError::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].tensor.shape(),
                tensor.shape()
            )));
        }
        if !tensor.is_finite() {
            return Err(DdnError::Numeric(format!("parameter {name} is not finite")));
        }
        self.params[i].tensor = tensor;
        Ok(())
    }

    /// Total trainable scalar count (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    fn tensor(&self, name: &str) -> &Tensor5<f32> {
        &self.params[self.index[name]].tensor
    }

    /// Records the forward pass on `g`. `src` and `tgt` are `[N, 1, p, p, p]`.
    /// Trainable tensors become graph parameters in train mode and constants
    /// in infer mode.
    pub fn build_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        src: NodeId,
        tgt: NodeId,
        mode: Mode,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let p = cfg.patch_size;
        for id in [src, tgt] {
            let s = g.value(id).shape();
            if s[1] != 1 || s[2..] != [p, p, p] {
                return Err(DdnError::shape(format!(
                    "model expects [N, 1, {p}, {p}, {p}] patches, got {s:?}"
                )));
            }
        }
        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut leaf = |g: &mut Graph<T>, name: &str| -> NodeId {
            let t = self.tensor(name).cast::<T>();
            match mode {
                Mode::Train => {
                    let id = g.param(name, t);
                    params.push((name.to_string(), id));
                    id
                }
                Mode::Infer => g.input(t),
            }
        };
        let conv = |g: &mut Graph<T>, leaf: &mut dyn FnMut(&mut Graph<T>, &str) -> NodeId, x: NodeId, name: &str, padding: Padding| {
            let w = leaf(g, &format!("{name}.w"));
            let b = leaf(g, &format!("{name}.b"));
            g.conv3d(x, w, b, 1, padding)
        };

        let input = g.concat_channels(&[src, tgt])?;
        let stem = conv(g, &mut leaf, input, "stem", Padding::Same)?;

        let mut dense = |g: &mut Graph<T>, leaf: &mut dyn FnMut(&mut Graph<T>, &str) -> NodeId, block: usize, x: NodeId| -> Result<NodeId> {
            let mut features = vec![x];
            for u in 0..cfg.units_per_block {
                let pre = format!("b{block}.u{u}");
                let cat = g.concat_channels(&features)?;
                let gamma = leaf(g, &format!("{pre}.bn.gamma"));
                let beta = leaf(g, &format!("{pre}.bn.beta"));
                let bn_mode = match mode {
                    Mode::Train => BatchNormMode::Train { eps: cfg.bn_eps },
                    Mode::Infer => BatchNormMode::Infer {
                        mean: self.tensor(&format!("{pre}.bn.mean")).data().iter().map(|&v| v as f64).collect(),
                        var: self.tensor(&format!("{pre}.bn.var")).data().iter().map(|&v| v as f64).collect(),
                        eps: cfg.bn_eps,
                    },
                };
                let (bn, stats) = g.batch_norm(cat, gamma, beta, bn_mode)?;
                if let Some(s) = stats {
                    batch_stats.push((format!("{pre}.bn"), s));
                }
                let act = g.leaky_relu(bn, cfg.leaky_slope)?;
                let out = conv(g, leaf, act, &format!("{pre}.conv"), Padding::Same)?;
                features.push(out);
            }
            g.concat_channels(&features)
        };

        let b1 = dense(g, &mut leaf, 1, stem)?;
        let global = conv(g, &mut leaf, b1, "global", Padding::Same)?;
        let t = conv(g, &mut leaf, b1, "trans", Padding::Same)?;
        let pooled = g.avg_pool2(t)?;
        let b2 = dense(g, &mut leaf, 2, pooled)?;
        let local = conv(g, &mut leaf, b2, "local", Padding::Same)?;
        let up = g.upsample_trilinear(local, 2)?;
        let up = g.scale(up, 2.0)?;
        let both = g.concat_channels(&[global, up])?;
        let fused = conv(g, &mut leaf, both, "fusion", Padding::Same)?;

        let n = g.value(src).n();
        let half = p / 2;
        let expect = [
            (global, [n, 3, p, p, p]),
            (local, [n, 3, half, half, half]),
            (fused, [n, 3, p, p, p]),
        ];
        for (id, shape) in expect {
            if g.value(id).shape() != shape {
                return Err(DdnError::shape(format!(
                    "flow head produced {:?}, expected {shape:?}",
                    g.value(id).shape()
                )));
            }
        }
        Ok(ForwardNodes {
            global,
            local,
            fused,
            params,
            batch_stats,
        })
    }

    /// Runs the network on `[N, 1, p, p, p]` patches.
    pub fn forward<T: Real>(&self, src: &Tensor5<T>, tgt: &Tensor5<T>, mode: Mode) -> Result<FlowOutput<T>> {
        let mut g = Graph::new();
        let s = g.input(src.clone());
        let t = g.input(tgt.clone());
        let nodes = self.build_graph(&mut g, s, t, mode)?;
        Ok(FlowOutput {
            global: g.take_value(nodes.global),
            local: g.take_value(nodes.local),
            fused: g.take_value(nodes.fused),
        })
    }

    /// `r <- momentum * r + (1 - momentum) * batch` for every batch-norm layer.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        let m = self.config.bn_momentum;
        for (layer, s) in stats {
            for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
                let name = format!("{layer}.{suffix}");
                let i = *self
                    .index
                    .get(&name)
                    .ok_or_else(|| DdnError::config(format!("no parameter {name}")))?;
                let t = &mut self.params[i].tensor;
                if t.len() != batch.len() {
                    return Err(DdnError::shape(format!("running stat {name} size mismatch")));
                }
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (m * *r as f64 + (1.0 - m) * b) as f32;
                }
            }
        }
        Ok(())
    }
}
