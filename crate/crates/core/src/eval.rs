//! Similarity metrics, synthetic deformations, validation and the slice
//! renderings used to inspect registrations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::field::DisplacementField;
use crate::infer::{register_volume, FlowPredictor};
use crate::render::{quantize_unit, Gray8, Rgb8};
use crate::volume::{Slice2, Volume3};
use crate::warp::warp_volume;

pub const DEFAULT_MI_BINS: usize = 32;

fn same_dims(a: &Volume3, b: &Volume3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DdnError::shape(format!("dims {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Pearson correlation over all voxels.
pub fn global_ncc(a: &Volume3, b: &Volume3) -> Result<f64> {
    same_dims(a, b)?;
    if a.is_empty() {
        return Err(DdnError::Empty("no voxels".into()));
    }
    let n = a.len() as f64;
    let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (da, db) = (x as f64 - ma, y as f64 - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(DdnError::UndefinedMetric("correlation of a constant volume".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn bin_of(v: f32, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(DdnError::Range(format!("intensity {v} outside [0, 1]")));
    }
    Ok(((v as f64 * bins as f64) as usize).min(bins - 1))
}

/// Histogram mutual information in nats over `bins` x `bins` uniform cells
/// of the unit square.
pub fn mutual_information(a: &Volume3, b: &Volume3, bins: usize) -> Result<f64> {
    same_dims(a, b)?;
    if bins < 2 {
        return Err(DdnError::config(format!("bins must be >= 2, got {bins}")));
    }
    if a.is_empty() {
        return Err(DdnError::Empty("no voxels".into()));
    }
    let mut joint = vec![0u64; bins * bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        joint[bin_of(x, bins)? * bins + bin_of(y, bins)?] += 1;
    }
    let n = a.len() as f64;
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] as f64 / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformParams {
    /// Control-node spacing in voxels.
    pub grid_spacing: usize,
    /// Standard deviation of each node displacement, in voxels.
    pub sigma: f64,
}

impl Default for DeformParams {
    fn default() -> Self {
        DeformParams {
            grid_spacing: 16,
            sigma: 3.0,
        }
    }
}

/// Smooth random field: normal displacements on a coarse control grid,
/// trilinearly interpolated and zeroed on the boundary faces.
pub fn gaussian_deformation(dims: [usize; 3], params: &DeformParams, seed: u64) -> Result<DisplacementField> {
    let g = params.grid_spacing;
    if g < 2 {
        return Err(DdnError::config(format!("grid_spacing must be >= 2, got {g}")));
    }
    if !(params.sigma >= 0.0 && params.sigma.is_finite()) {
        return Err(DdnError::config(format!("sigma must be >= 0, got {}", params.sigma)));
    }
    if dims.contains(&0) {
        return Err(DdnError::Empty(format!("dims {dims:?}")));
    }
    let nodes = dims.map(|d| (d - 1).div_ceil(g) + 1);
    let grid = control_grid(nodes, params.sigma, seed);
    let [nx, ny, nz] = dims;
    let mut comps = [vec![0.0f32; nx * ny * nz], vec![0.0; nx * ny * nz], vec![0.0; nx * ny * nz]];
    let locate = |i: usize| (i / g, (i % g) as f64 / g as f64);
    let node = |c: usize, x: usize, y: usize, z: usize| grid[c][(z * nodes[1] + y) * nodes[0] + x];
    for z in 1..nz.saturating_sub(1) {
        let (z0, fz) = locate(z);
        for y in 1..ny.saturating_sub(1) {
            let (y0, fy) = locate(y);
            for x in 1..nx.saturating_sub(1) {
                let (x0, fx) = locate(x);
                let i = (z * ny + y) * nx + x;
                for (c, comp) in comps.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                                let w = wx * wy * wz;
                                if w != 0.0 {
                                    v += w * node(c, x0 + dx, y0 + dy, z0 + dz);
                                }
                            }
                        }
                    }
                    comp[i] = v as f32;
                }
            }
        }
    }
    DisplacementField::new(dims, comps)
}

/// Normal(0, sigma) samples for every control node, component-major.
pub fn control_grid(nodes: [usize; 3], sigma: f64, seed: u64) -> [Vec<f64>; 3] {
    let n = nodes[0] * nodes[1] * nodes[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sigma == 0.0 {
        return [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    [0, 1, 2].map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect())
}

fn same_slice(a: &Slice2, b: &Slice2) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(DdnError::shape(format!(
            "slices {}x{} and {}x{} differ",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `255 * (1 - |a - b|)`: white where aligned, dark where not.
pub fn difference_image(a: &Slice2, b: &Slice2) -> Result<Gray8> {
    same_slice(a, b)?;
    let pixels = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| quantize_unit(1.0 - (x as f64 - y as f64).abs()))
        .collect();
    Ok(Gray8 {
        width: a.width,
        height: a.height,
        pixels,
    })
}

/// Target in red, registered image in green; overlap shows as yellow.
pub fn overlay_rg(tgt: &Slice2, reg: &Slice2) -> Result<Rgb8> {
    same_slice(tgt, reg)?;
    let mut pixels = Vec::with_capacity(3 * tgt.data.len());
    for (&t, &r) in tgt.data.iter().zip(&reg.data) {
        pixels.extend_from_slice(&[quantize_unit(t as f64), quantize_unit(r as f64), 0]);
    }
    Ok(Rgb8 {
        width: tgt.width,
        height: tgt.height,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub cc_before: f64,
    pub mi_before: f64,
    pub cc_after: f64,
    pub mi_after: f64,
}

impl ValidationReport {
    pub fn to_csv(&self) -> String {
        format!(
            "cc_before,mi_before,cc_after,mi_after\n{},{},{},{}\n",
            self.cc_before, self.mi_before, self.cc_after, self.mi_after
        )
    }
}

/// Everything a validation run produces.
#[derive(Debug, Clone)]
pub struct Validation {
    pub report: ValidationReport,
    pub applied: DisplacementField,
    pub deformed: Volume3,
    pub recovered: DisplacementField,
    pub warped: Volume3,
}

/// Deforms `vol` with a random smooth field and registers it back onto
/// itself, scoring the deformed and the registered volume against `vol`.
pub fn validation_run(
    predictor: &dyn FlowPredictor,
    vol: &Volume3,
    deform: &DeformParams,
    seed: u64,
    overlap: f64,
    bins: usize,
) -> Result<Validation> {
    let applied = gaussian_deformation(vol.dims(), deform, seed)?;
    let deformed = warp_volume(vol, &applied)?;
    let (recovered, warped) = register_volume(predictor, &deformed, vol, overlap)?;
    let report = ValidationReport {
        cc_before: global_ncc(&deformed, vol)?,
        mi_before: mutual_information(&deformed, vol, bins)?,
        cc_after: global_ncc(&warped, vol)?,
        mi_after: mutual_information(&warped, vol, bins)?,
    };
    Ok(Validation {
        report,
        applied,
        deformed,
        recovered,
        warped,
    })
}

/// Sum of `count` isotropic Gaussian blobs with seeded centres, widths and
/// amplitudes, normalized to [0, 1].
pub fn blob_phantom(dims: [usize; 3], count: usize, sigma_range: (f64, f64), seed: u64) -> Result<Volume3> {
    let (lo, hi) = sigma_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(DdnError::config(format!("invalid blob width range {sigma_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..count)
        .map(|_| {
            let c = dims.map(|d| rng.gen_range(0.0..d as f64));
            let s = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let a = rng.gen_range(0.5..1.0);
            (c, s, a)
        })
        .collect();
    let v = Volume3::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        blobs
            .iter()
            .map(|(c, s, a)| {
                let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                a * (-r2 / (2.0 * s * s)).exp()
            })
            .sum::<f64>() as f32
    })?;
    Ok(v.normalize_intensity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::ConstantFlow;

    fn noise(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::from_fn(dims, |_, _, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn ncc_identity_and_negation() {
        let a = noise([5, 6, 7], 1);
        assert!((global_ncc(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let neg = Volume3::new(a.dims(), [1.0; 3], a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!((global_ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-9);
        let flat = Volume3::filled([5, 6, 7], 0.3).unwrap();
        assert!(matches!(global_ncc(&a, &flat), Err(DdnError::UndefinedMetric(_))));
        assert!(global_ncc(&a, &noise([5, 6, 6], 1)).is_err());
    }

    #[test]
    fn mi_rejects_out_of_range() {
        let a = noise([4, 4, 4], 1);
        let mut b = a.clone();
        b.data_mut()[3] = 1.5;
        assert!(matches!(mutual_information(&a, &b, 32), Err(DdnError::Range(_))));
        assert!(mutual_information(&a, &a, 1).is_err());
    }

    #[test]
    fn mi_of_independent_axes_is_zero() {
        let a = Volume3::from_fn([16, 16, 2], |x, _, _| x as f32 / 15.0).unwrap();
        let b = Volume3::from_fn([16, 16, 2], |_, y, _| y as f32 / 15.0).unwrap();
        assert!(mutual_information(&a, &b, 8).unwrap() < 1e-10);
    }

    #[test]
    fn deformation_basics() {
        let dims = [20, 18, 17];
        let zero = gaussian_deformation(dims, &DeformParams { grid_spacing: 4, sigma: 0.0 }, 3).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let p = DeformParams { grid_spacing: 4, sigma: 2.0 };
        let a = gaussian_deformation(dims, &p, 3).unwrap();
        assert_eq!(a, gaussian_deformation(dims, &p, 3).unwrap());
        assert_ne!(a, gaussian_deformation(dims, &p, 4).unwrap());
        assert!(a.max_abs() > 0.0);
        let [nx, ny, nz] = dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1 {
                        assert_eq!(a.at((z * ny + y) * nx + x), [0.0; 3]);
                    }
                }
            }
        }
        assert!(gaussian_deformation(dims, &DeformParams { grid_spacing: 1, sigma: 1.0 }, 0).is_err());
    }

    #[test]
    fn deformation_interpolates_control_nodes() {
        // Interior lattice points that coincide with control nodes carry the
        // node value itself.
        let dims = [17, 17, 17];
        let p = DeformParams { grid_spacing: 8, sigma: 1.5 };
        let f = gaussian_deformation(dims, &p, 21).unwrap();
        let grid = control_grid([3, 3, 3], 1.5, 21);
        let centre = (8 * 17 + 8) * 17 + 8;
        for c in 0..3 {
            assert_eq!(f.component(c)[centre], grid[c][13] as f32);
        }
    }

    #[test]
    fn control_node_spread_matches_sigma() {
        let sigma = 2.5;
        let grid = control_grid([12, 12, 12], sigma, 8);
        let all: Vec<f64> = grid.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(all.len() >= 1000);
        assert!((sd - sigma).abs() < 0.1 * sigma, "sd {sd}");
    }

    #[test]
    fn rendering_conventions() {
        let s = |v: Vec<f32>| Slice2::new(v.len(), 1, v).unwrap();
        let a = s(vec![0.3, 1.0, 0.0, 0.75]);
        assert!(difference_image(&a, &a).unwrap().pixels.iter().all(|&p| p == 255));
        let d = difference_image(&s(vec![1.0, 0.0, 0.5, 0.0]), &s(vec![0.0, 1.0, 0.0, 0.5])).unwrap();
        assert_eq!(d.pixels, [0, 0, 128, 128]);
        let o = overlay_rg(&s(vec![1.0, 1.0, 0.0]), &s(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(o.pixel(0, 0), [255, 255, 0]);
        assert_eq!(o.pixel(1, 0), [255, 0, 0]);
        assert_eq!(o.pixel(2, 0), [0, 0, 0]);
        assert!(overlay_rg(&a, &s(vec![0.0])).is_err());
    }

    #[test]
    fn identity_validation_keeps_scores() {
        let vol = blob_phantom([24, 24, 24], 6, (2.0, 4.0), 5).unwrap();
        let stub = ConstantFlow { patch_size: 8, flow: [0.0; 3] };
        let p = DeformParams { grid_spacing: 8, sigma: 1.5 };
        let v = validation_run(&stub, &vol, &p, 7, 0.5, 32).unwrap();
        assert_eq!(v.report.cc_before, v.report.cc_after);
        assert_eq!(v.report.mi_before, v.report.mi_after);
        assert!(v.report.cc_before < 1.0);
        let none = validation_run(&stub, &vol, &DeformParams { sigma: 0.0, ..p }, 7, 0.5, 32).unwrap();
        assert!((none.report.cc_before - 1.0).abs() < 1e-12);
        assert!((none.report.cc_after - 1.0).abs() < 1e-12);
        assert!(v.report.to_csv().starts_with("cc_before,mi_before,cc_after,mi_after\n"));
    }

    #[test]
    fn phantom_is_normalized_and_seeded() {
        let a = blob_phantom([16, 16, 16], 5, (2.0, 3.0), 1).unwrap();
        assert_eq!(a.min_max(), (0.0, 1.0));
        assert_eq!(a, blob_phantom([16, 16, 16], 5, (2.0, 3.0), 1).unwrap());
        assert_ne!(a, blob_phantom([16, 16, 16], 5, (2.0, 3.0), 2).unwrap());
    }
}
