//! Unsupervised training over patch-pair datasets, plus the DDNC checkpoint
//! format.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u16, put_u32, write_file, ByteReader};
use crate::error::{DdnError, Result};
use crate::loss::LossConfig;
use crate::model::{build_ddn, DdnConfig, DdnModel, Mode, Parameter};
use crate::patches::PatchPairSet;
use crate::tensor::{Graph, Tensor5};

pub const DDNC_MAGIC: &[u8; 4] = b"DDNC";
pub const DDNC_VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total optimization steps, counted from the start of training.
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 1000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DdnError::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DdnError::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DdnError::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(DdnError::config("adam_eps must be > 0"));
        }
        self.loss.validate()
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Tensor5<f32>,
    pub v: Tensor5<f32>,
}

/// Optimizer state. Moments are kept in f32 so that a checkpoint restores
/// them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    /// Zero moments for every trainable parameter of `model`.
    pub fn for_model(model: &DdnModel) -> Self {
        let moments = model
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Moments {
                name: p.name.clone(),
                m: Tensor5::zeros(p.tensor.shape()),
                v: Tensor5::zeros(p.tensor.shape()),
            })
            .collect();
        AdamState { step: 0, moments }
    }
}

/// One bias-corrected update. `t` is the 1-based index of this update.
pub fn adam_step(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, h: &AdamHyper) {
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    assert!(t >= 1);
    let c1 = 1.0 - h.beta1.powf(t as f64);
    let c2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = m[i] as f64 / c1;
        let vhat = v[i] as f64 / c2;
        param[i] = (param[i] as f64 - h.lr * mhat / (vhat.sqrt() + h.eps)) as f32;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    /// 0-based index of the update this record precedes.
    pub step: u64,
    pub sim: f64,
    pub smooth: f64,
    pub total: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,sim,smooth,total,ms\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{:.3}", r.step, r.sim, r.smooth, r.total, r.ms);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DdnModel,
    pub optimizer: AdamState,
    pub log: TrainLog,
}

/// Dataset indices for update `step`. Sample `k = step * batch + b` is drawn
/// from epoch `k / n`, whose order is a shuffle seeded by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|b| {
            let k = step * batch as u64 + b;
            let epoch = k / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[(k % n as u64) as usize]
        })
        .collect()
}

fn stack(dataset: &PatchPairSet, idx: &[usize], tgt: bool) -> Tensor5<f32> {
    let p = dataset.patch_size();
    let mut data = Vec::with_capacity(idx.len() * dataset.voxels());
    for &i in idx {
        let pair = &dataset.pairs()[i];
        data.extend_from_slice(if tgt { &pair.tgt } else { &pair.src });
    }
    Tensor5::new([idx.len(), 1, p, p, p], data).expect("patch sizes validated by the dataset")
}

/// Trains a model from a fresh optimizer state.
pub fn train(model: DdnModel, dataset: &PatchPairSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let opt = AdamState::for_model(&model);
    train_from(model, opt, dataset, cfg, &mut |_, _| Ok(()))
}

/// Continues training until `cfg.steps` updates have been applied in total.
/// `on_checkpoint` runs after every `cfg.checkpoint_every`-th update.
pub fn train_from(
    mut model: DdnModel,
    mut opt: AdamState,
    dataset: &PatchPairSet,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&DdnModel, &AdamState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DdnError::Empty("training dataset has no patch pairs".into()));
    }
    if dataset.patch_size() != model.config().patch_size {
        return Err(DdnError::shape(format!(
            "dataset patch size {} differs from model patch size {}",
            dataset.patch_size(),
            model.config().patch_size
        )));
    }
    let trainable: Vec<&Parameter> = model.params().iter().filter(|p| p.trainable).collect();
    if opt.moments.len() != trainable.len()
        || opt
            .moments
            .iter()
            .zip(&trainable)
            .any(|(m, p)| m.name != p.name || m.m.shape() != p.tensor.shape())
    {
        return Err(DdnError::config("optimizer state does not match the model"));
    }
    let hyper = cfg.hyper();
    let mut log = TrainLog::default();
    while opt.step < cfg.steps {
        let started = Instant::now();
        let idx = batch_indices(dataset.len(), cfg.batch_size, cfg.seed, opt.step);
        let mut g = Graph::<f32>::new();
        let src = g.input(stack(dataset, &idx, false));
        let tgt = g.input(stack(dataset, &idx, true));
        let nodes = model.build_graph(&mut g, src, tgt, Mode::Train)?;
        let loss = g.total_loss(src, tgt, nodes.fused, &cfg.loss)?;
        let sim = g.value(loss.similarity).item() as f64;
        let smooth = g.value(loss.smoothness).item() as f64;
        let total = g.value(loss.total).item() as f64;
        g.backward(loss.total)?;

        let t = opt.step + 1;
        for ((name, id), mom) in nodes.params.iter().zip(opt.moments.iter_mut()) {
            debug_assert_eq!(name, &mom.name);
            let grad = g.grad(*id).cloned().unwrap_or_else(|| Tensor5::zeros(mom.m.shape()));
            if !grad.is_finite() {
                return Err(DdnError::Numeric(format!("gradient of {name} is not finite at step {}", opt.step)));
            }
            let mut value = model.param(name).expect("graph params come from the model").tensor.clone();
            adam_step(value.data_mut(), grad.data(), mom.m.data_mut(), mom.v.data_mut(), t, &hyper);
            model.set_param(name, value)?;
        }
        model.update_running_stats(&nodes.batch_stats)?;
        opt.step = t;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        log::debug!("step {} sim {sim:.5} smooth {smooth:.5} total {total:.5} ({ms:.0} ms)", t - 1);
        log.records.push(TrainRecord {
            step: t - 1,
            sim,
            smooth,
            total,
            ms,
        });
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
            on_checkpoint(&model, &opt)?;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
    })
}

/// Mean similarity, smoothness and total loss over every pair of `dataset`,
/// with batch-norm running statistics.
pub fn dataset_loss(model: &DdnModel, dataset: &PatchPairSet, loss: &LossConfig) -> Result<(f64, f64, f64)> {
    if dataset.is_empty() {
        return Err(DdnError::Empty("dataset has no patch pairs".into()));
    }
    let mut sums = (0.0, 0.0, 0.0);
    for i in 0..dataset.len() {
        let mut g = Graph::<f32>::new();
        let src = g.input(stack(dataset, &[i], false));
        let tgt = g.input(stack(dataset, &[i], true));
        let nodes = model.build_graph(&mut g, src, tgt, Mode::Infer)?;
        let l = g.total_loss(src, tgt, nodes.fused, loss)?;
        sums.0 += g.value(l.similarity).item() as f64;
        sums.1 += g.value(l.smoothness).item() as f64;
        sums.2 += g.value(l.total).item() as f64;
    }
    let n = dataset.len() as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        put_u32(out, d as u32);
    }
    put_f32s(out, data);
}

/// Serializes model parameters (including running statistics) and, when
/// given, the optimizer state.
pub fn checkpoint_bytes(model: &DdnModel, opt: Option<&AdamState>) -> Vec<u8> {
    let config = serde_json::to_string(model.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(DDNC_MAGIC);
    put_u32(&mut out, DDNC_VERSION);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    let count = model.params().len() + opt.map_or(0, |o| 1 + 2 * o.moments.len());
    put_u32(&mut out, count as u32);
    for p in model.params() {
        put_tensor(&mut out, &p.name, &p.tensor.shape(), p.tensor.data());
    }
    if let Some(o) = opt {
        put_tensor(&mut out, "opt.step", &[2], &[f32::from_bits(o.step as u32), f32::from_bits((o.step >> 32) as u32)]);
        for mom in &o.moments {
            put_tensor(&mut out, &format!("opt.m.{}", mom.name), &mom.m.shape(), mom.m.data());
            put_tensor(&mut out, &format!("opt.v.{}", mom.name), &mom.v.shape(), mom.v.data());
        }
    }
    out
}

/// Parses a DDNC image. The optimizer state is `None` when the file holds
/// only model tensors.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(DdnModel, Option<AdamState>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(DDNC_MAGIC)?;
    r.version(DDNC_VERSION)?;
    let len_at = r.offset();
    let len = r.u32("config length")? as usize;
    let blob = r.take(len, "config text")?;
    let config: DdnConfig = std::str::from_utf8(blob)
        .ok()
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| DdnError::format(len_at + 4, "config text is not a valid model config"))?;
    config
        .validate()
        .map_err(|e| DdnError::format(len_at + 4, e.to_string()))?;
    let mut model = build_ddn(&config, 0)?;
    let mut opt = AdamState::for_model(&model);
    let mut seen = vec![false; model.params().len()];
    let mut seen_opt = vec![[false; 2]; opt.moments.len()];
    let mut has_step = false;

    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let at = r.offset();
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| DdnError::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dim")? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| DdnError::format(at, format!("tensor {name} dims {dims:?} exceed the file")))?;
        let data = r.f32_vec(n, "tensor data")?;
        let bad = |what: &str| DdnError::format(at, format!("tensor {name}: {what}"));

        if name == "opt.step" {
            if dims != [2] {
                return Err(bad("expected dims [2]"));
            }
            opt.step = data[0].to_bits() as u64 | (data[1].to_bits() as u64) << 32;
            has_step = true;
        } else if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
            let (slot, pname) = match (rest.strip_prefix("m."), rest.strip_prefix("v.")) {
                (Some(p), _) => (0, p),
                (_, Some(p)) => (1, p),
                _ => return Err(bad("unknown optimizer tensor")),
            };
            let i = opt
                .moments
                .iter()
                .position(|m| m.name == pname)
                .ok_or_else(|| bad("no such trainable parameter"))?;
            let target = if slot == 0 { &mut opt.moments[i].m } else { &mut opt.moments[i].v };
            if dims != target.shape() {
                return Err(bad(&format!("expected dims {:?}", target.shape())));
            }
            target.data_mut().copy_from_slice(&data);
            seen_opt[i][slot] = true;
        } else {
            let i = model
                .params()
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| bad("unknown parameter"))?;
            let shape = model.params()[i].tensor.shape();
            if dims != shape {
                return Err(bad(&format!("expected dims {shape:?}")));
            }
            let t = Tensor5::new(shape, data)?;
            model.set_param(&name, t).map_err(|e| bad(&e.to_string()))?;
            seen[i] = true;
        }
    }
    r.finish()?;
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(DdnError::format(
            r.offset(),
            format!("parameter {} missing", model.params()[i].name),
        ));
    }
    let any_opt = has_step || seen_opt.iter().flatten().any(|&s| s);
    if any_opt && !(has_step && seen_opt.iter().flatten().all(|&s| s)) {
        return Err(DdnError::format(r.offset(), "optimizer state is incomplete"));
    }
    Ok((model, any_opt.then_some(opt)))
}

pub fn save_checkpoint(model: &DdnModel, opt: Option<&AdamState>, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_bytes(model, opt))
}

pub fn load_checkpoint(path: &Path) -> Result<(DdnModel, Option<AdamState>)> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &DdnConfig) -> Result<(DdnModel, Option<AdamState>)> {
    let (model, opt) = load_checkpoint(path)?;
    let have = serde_json::to_string(model.config()).expect("config serializes");
    let want = serde_json::to_string(expected).expect("config serializes");
    if have != want {
        return Err(DdnError::config(format!(
            "checkpoint was written for config {have}, expected {want}"
        )));
    }
    Ok((model, opt))
}
