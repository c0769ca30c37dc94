//! Whole-volume registration by overlapping tiles.

use rayon::prelude::*;

use crate::error::{DdnError, Result};
use crate::field::DisplacementField;
use crate::model::{DdnModel, Mode};
use crate::tensor::Tensor5;
use crate::volume::Volume3;
use crate::warp::warp_volume;

/// Lower bound of the per-axis tent weight.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Tiles processed between two accumulation passes.
const TILE_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub patch_size: usize,
    pub stride: usize,
    /// `[x, y, z]` corners, x varying fastest.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + p <= dim).collect();
    if *v.last().unwrap() + p < dim {
        v.push(dim - p);
    }
    v
}

/// Tiles of edge `p` with the given fractional overlap. The stride is
/// `floor(p * (1 - overlap))`, at least 1; the last tile on each axis is
/// moved inward to end at the border.
pub fn tile_volume(dims: [usize; 3], p: usize, overlap: f64) -> Result<TilePlan> {
    if !(0.0..=0.9).contains(&overlap) {
        return Err(DdnError::Range(format!("overlap must be in [0, 0.9], got {overlap}")));
    }
    if p == 0 || dims.iter().any(|&d| p > d) {
        return Err(DdnError::Range(format!("patch size {p} does not fit in {dims:?}")));
    }
    let stride = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let [xs, ys, zs] = dims.map(|d| axis_origins(d, p, stride));
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(TilePlan {
        patch_size: p,
        stride,
        origins,
    })
}

fn tent(i: usize, p: usize) -> f64 {
    if p == 1 {
        return 1.0;
    }
    let w = 1.0 - (2.0 * i as f64 / (p - 1) as f64 - 1.0).abs();
    w.max(WEIGHT_FLOOR)
}

/// Separable tent window over a `p^3` tile, x fastest.
pub fn blend_weights(p: usize) -> Vec<f64> {
    let axis: Vec<f64> = (0..p).map(|i| tent(i, p)).collect();
    let mut w = Vec::with_capacity(p * p * p);
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                w.push(axis[x] * axis[y] * axis[z]);
            }
        }
    }
    w
}

/// Anything that maps a source/target tile pair to a flow tile.
pub trait FlowPredictor: Sync {
    fn patch_size(&self) -> usize;

    /// `src` and `tgt` hold `p^3` voxels, x fastest. Returns the x, y and z
    /// displacement tiles in the same layout.
    fn predict(&self, src: &[f32], tgt: &[f32]) -> Result<[Vec<f32>; 3]>;
}

impl FlowPredictor for DdnModel {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn predict(&self, src: &[f32], tgt: &[f32]) -> Result<[Vec<f32>; 3]> {
        let p = self.patch_size();
        let s = Tensor5::new([1, 1, p, p, p], src.to_vec())?;
        let t = Tensor5::new([1, 1, p, p, p], tgt.to_vec())?;
        let out = self.forward(&s, &t, Mode::Infer)?.fused;
        Ok([0, 1, 2].map(|c| out.channel(0, c).to_vec()))
    }
}

/// Predicts the same displacement for every voxel.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFlow {
    pub patch_size: usize,
    pub flow: [f32; 3],
}

impl FlowPredictor for ConstantFlow {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn predict(&self, src: &[f32], _tgt: &[f32]) -> Result<[Vec<f32>; 3]> {
        Ok(self.flow.map(|u| vec![u; src.len()]))
    }
}

/// Weight sum of every voxel under a plan.
pub fn weight_sums(dims: [usize; 3], plan: &TilePlan) -> Vec<f64> {
    let p = plan.patch_size;
    let w = blend_weights(p);
    let mut sums = vec![0.0; dims[0] * dims[1] * dims[2]];
    for &o in &plan.origins {
        for_each_tile_voxel(dims, p, o, |t, v| sums[v] += w[t]);
    }
    sums
}

fn for_each_tile_voxel(dims: [usize; 3], p: usize, o: [usize; 3], mut f: impl FnMut(usize, usize)) {
    for z in 0..p {
        for y in 0..p {
            let row = ((o[2] + z) * dims[1] + o[1] + y) * dims[0] + o[0];
            let t = (z * p + y) * p;
            for x in 0..p {
                f(t + x, row + x);
            }
        }
    }
}

/// Registers `src` onto `tgt`: predicts a flow per tile, blends the tiles
/// with tent weights and warps the whole source once.
///
/// Tiles are predicted in parallel and accumulated in plan order, so the
/// result does not depend on the thread count.
pub fn register_volume(
    predictor: &dyn FlowPredictor,
    src: &Volume3,
    tgt: &Volume3,
    overlap: f64,
) -> Result<(DisplacementField, Volume3)> {
    let dims = src.dims();
    if tgt.dims() != dims {
        return Err(DdnError::shape(format!(
            "source dims {dims:?} differ from target dims {:?}",
            tgt.dims()
        )));
    }
    let p = predictor.patch_size();
    let plan = tile_volume(dims, p, overlap)?;
    let w = blend_weights(p);
    let n = src.len();
    let mut acc = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];
    let mut wsum = vec![0.0f64; n];
    for chunk in plan.origins.chunks(TILE_CHUNK) {
        let flows: Vec<[Vec<f32>; 3]> = chunk
            .par_iter()
            .map(|&o| {
                let s = src.crop(o, [p; 3])?;
                let t = tgt.crop(o, [p; 3])?;
                let f = predictor.predict(&s, &t)?;
                if f.iter().any(|c| c.len() != p * p * p) {
                    return Err(DdnError::shape("predictor returned a tile of the wrong size"));
                }
                if f.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(DdnError::Numeric(format!("non-finite flow in tile at {o:?}")));
                }
                Ok(f)
            })
            .collect::<Result<_>>()?;
        for (&o, f) in chunk.iter().zip(&flows) {
            for_each_tile_voxel(dims, p, o, |t, v| {
                let wt = w[t];
                wsum[v] += wt;
                for c in 0..3 {
                    acc[c][v] += wt * f[c][t] as f64;
                }
            });
        }
    }
    if let Some(i) = wsum.iter().position(|&s| !(s > 0.0)) {
        return Err(DdnError::Numeric(format!("voxel {i} received no tile weight")));
    }
    let comps = [0, 1, 2].map(|c| {
        acc[c]
            .iter()
            .zip(&wsum)
            .map(|(a, s)| (a / s) as f32)
            .collect::<Vec<f32>>()
    });
    let field = DisplacementField::new(dims, comps)?;
    let warped = warp_volume(src, &field)?;
    Ok((field, warped))
}
