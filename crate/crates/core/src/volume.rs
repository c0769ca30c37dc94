//! Dense scalar volumes, the DDNV file format and slice export.
//!
//! Voxel data is stored x-fastest, then y, then z. All algorithms work in voxel
//! units; the physical spacing is carried along for bookkeeping only.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::binio::{checked_volume, put_f32s, put_u32, write_file, ByteReader};
use crate::error::{DdnError, Result};
use crate::render::{quantize_unit, Gray8};

pub const DDNV_MAGIC: &[u8; 4] = b"DDNV";
pub const DDNV_VERSION: u32 = 1;
/// Bytes preceding the voxel payload of a DDNV file.
pub const DDNV_HEADER_LEN: usize = 4 + 4 + 12 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl FromStr for Axis {
    type Err = DdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(DdnError::Range(format!("unknown axis {other:?}"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// A 2D scalar image cut out of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Slice2 {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(DdnError::shape(format!(
                "slice {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Slice2 {
            width,
            height,
            data,
        })
    }

    pub fn to_gray(&self) -> Gray8 {
        Gray8 {
            width: self.width,
            height: self.height,
            pixels: self.data.iter().map(|&v| quantize_unit(v as f64)).collect(),
        }
    }
}

/// A dense 3D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(DdnError::shape(format!("dims must be >= 1, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(DdnError::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Volume3 {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::new(dims, [1.0; 3], vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    /// Copies the box of extent `size` starting at `origin`, x-fastest.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Vec<f32>> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(DdnError::Range(format!(
                    "crop {origin:?}+{size:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let row = self.index(origin[0], y, z);
                out.extend_from_slice(&self.data[row..row + size[0]]);
            }
        }
        Ok(out)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Affine map of the intensity range onto [0, 1]. A constant volume maps to zeros.
    pub fn normalize_intensity(&self) -> Volume3 {
        let (lo, hi) = self.min_max();
        let range = hi as f64 - lo as f64;
        let data = if range > 0.0 {
            self.data
                .iter()
                .map(|&v| (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    /// Trilinear interpolation at a continuous voxel coordinate, clamped to the border.
    pub fn trilinear_sample(&self, x: f64, y: f64, z: f64) -> f32 {
        let [nx, ny, nz] = self.dims;
        let (x0, x1, fx) = bracket(x, nx);
        let (y0, y1, fy) = bracket(y, ny);
        let (z0, z1, fz) = bracket(z, nz);
        let v = |x: usize, y: usize, z: usize| self.data[(z * ny + y) * nx + x] as f64;
        let c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), fx);
        let c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), fx);
        let c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), fx);
        let c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        lerp(c0, c1, fz) as f32
    }

    /// Extracts the plane perpendicular to `axis` at `index`.
    ///
    /// Z slices are (x, y) images, Y slices (x, z), X slices (y, z).
    pub fn slice(&self, axis: Axis, index: usize) -> Result<Slice2> {
        let [nx, ny, nz] = self.dims;
        let extent = self.dims[axis.index()];
        if index >= extent {
            return Err(DdnError::Range(format!(
                "slice index {index} outside {axis} extent {extent}"
            )));
        }
        let (w, h) = match axis {
            Axis::Z => (nx, ny),
            Axis::Y => (nx, nz),
            Axis::X => (ny, nz),
        };
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let (x, y, z) = match axis {
                    Axis::Z => (c, r, index),
                    Axis::Y => (c, index, r),
                    Axis::X => (index, c, r),
                };
                data.push(self.data[(z * ny + y) * nx + x]);
            }
        }
        Slice2::new(w, h, data)
    }

    pub fn to_ddnv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DDNV_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(DDNV_MAGIC);
        put_u32(&mut out, DDNV_VERSION);
        for d in self.dims {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, &self.spacing);
        put_f32s(&mut out, &self.data);
        out
    }

    pub fn from_ddnv_bytes(bytes: &[u8]) -> Result<Volume3> {
        let mut r = ByteReader::new(bytes);
        r.magic(DDNV_MAGIC)?;
        r.version(DDNV_VERSION)?;
        let dims_at = r.offset();
        let dims = [r.u32("dx")?, r.u32("dy")?, r.u32("dz")?];
        if dims.contains(&0) {
            return Err(DdnError::format(dims_at, format!("zero extent in {dims:?}")));
        }
        let n = checked_volume(dims, dims_at)?;
        let spacing = [r.f32("sx")?, r.f32("sy")?, r.f32("sz")?];
        let data = r.f32_vec(n, "voxel payload")?;
        r.finish()?;
        Volume3::new(
            [dims[0] as usize, dims[1] as usize, dims[2] as usize],
            spacing,
            data,
        )
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Lower/upper lattice indices and fractional weight of a clamped coordinate.
#[inline]
pub(crate) fn bracket(c: f64, n: usize) -> (usize, usize, f64) {
    let hi = (n - 1) as f64;
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, hi) };
    let f = c.floor();
    let i0 = f as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - f)
}

pub fn load_volume(path: &Path) -> Result<Volume3> {
    let bytes = std::fs::read(path)?;
    Volume3::from_ddnv_bytes(&bytes)
}

pub fn save_volume(vol: &Volume3, path: &Path) -> Result<()> {
    write_file(path, &vol.to_ddnv_bytes())
}

/// Writes one slice as an 8-bit binary PGM, `round(255 v)` with round-half-up.
pub fn export_slice_gray(vol: &Volume3, axis: Axis, index: usize, path: &Path) -> Result<()> {
    vol.slice(axis, index)?.to_gray().write_pgm(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::parse_pgm;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3::from_fn(dims, |_, _, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn load_constructed_file() {
        let mut bytes = b"DDNV".to_vec();
        for v in [1u32, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for _ in 0..3 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        for _ in 0..8 {
            bytes.extend_from_slice(&0.5f32.to_le_bytes());
        }
        let v = Volume3::from_ddnv_bytes(&bytes).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = Volume3::filled([1, 1, 1], 0.0).unwrap().to_ddnv_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        match Volume3::from_ddnv_bytes(&bytes) {
            Err(DdnError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_overflowing_headers() {
        let bytes = random_volume([3, 2, 2], 1).to_ddnv_bytes();
        let err = Volume3::from_ddnv_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, DdnError::Format { offset: 32, .. }), "{err}");

        let mut huge = b"DDNV".to_vec();
        for v in [1u32, u32::MAX, u32::MAX, u32::MAX] {
            huge.extend_from_slice(&v.to_le_bytes());
        }
        let err = Volume3::from_ddnv_bytes(&huge).unwrap_err();
        assert!(matches!(err, DdnError::Format { offset: 8, .. }), "{err}");
    }

    #[test]
    fn single_voxel_file_length() {
        let v = Volume3::filled([1, 1, 1], 0.0).unwrap();
        let bytes = v.to_ddnv_bytes();
        // magic + version + 3 dims + 3 spacings + one voxel
        assert_eq!(bytes.len(), 4 + 4 + 12 + 12 + 4);
    }

    #[test]
    fn save_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ddnv");
        let v = random_volume([7, 5, 3], 42).with_spacing([6.45, 6.45, 10.0]);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(std::fs::read(&path).unwrap(), v.to_ddnv_bytes());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume3::filled([1, 1, 1], 0.0).unwrap();
        let err = save_volume(&v, Path::new("/nonexistent-dir/x/v.ddnv")).unwrap_err();
        assert!(matches!(err, DdnError::Io(_)));
    }

    #[test]
    fn normalize_examples() {
        let v = Volume3::new([4, 1, 1], [1.0; 3], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let n = v.normalize_intensity();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in n.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
        let c = Volume3::new([3, 1, 1], [1.0; 3], vec![5.0; 3]).unwrap();
        assert_eq!(c.normalize_intensity().data(), &[0.0, 0.0, 0.0]);
        let unit = Volume3::new([3, 1, 1], [1.0; 3], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(unit.normalize_intensity(), unit);
    }

    #[test]
    fn sampling_examples() {
        let v = random_volume([4, 3, 5], 3);
        assert_eq!(v.trilinear_sample(2.0, 1.0, 3.0), v.get(2, 1, 3));
        let two = Volume3::new([2, 1, 1], [1.0; 3], vec![0.0, 1.0]).unwrap();
        assert_eq!(two.trilinear_sample(0.5, 0.0, 0.0), 0.5);
        assert_eq!(
            v.trilinear_sample(-3.2, 0.0, 0.0),
            v.trilinear_sample(0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn slice_export_pixels() {
        let v = Volume3::new([2, 2, 1], [1.0; 3], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        export_slice_gray(&v, Axis::Z, 0, &path).unwrap();
        let img = parse_pgm(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(img.pixels, vec![0, 85, 170, 255]);

        let zero = Volume3::filled([3, 2, 2], 0.0).unwrap();
        export_slice_gray(&zero, Axis::Y, 1, &path).unwrap();
        let img = parse_pgm(&std::fs::read(&path).unwrap()).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0));

        assert!(matches!(
            export_slice_gray(&v, Axis::Z, 1, &path),
            Err(DdnError::Range(_))
        ));
    }

    proptest! {
        #[test]
        fn ddnv_round_trip(dx in 1usize..6, dy in 1usize..6, dz in 1usize..6, seed in any::<u64>()) {
            let v = random_volume([dx, dy, dz], seed);
            let back = Volume3::from_ddnv_bytes(&v.to_ddnv_bytes()).unwrap();
            prop_assert_eq!(back.to_ddnv_bytes(), v.to_ddnv_bytes());
        }

        #[test]
        fn normalize_idempotent(seed in any::<u64>()) {
            let v = random_volume([5, 4, 3], seed);
            let once = v.normalize_intensity();
            let twice = once.normalize_intensity();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }

        #[test]
        fn sampling_is_lipschitz(seed in any::<u64>(), px in 0.0f64..4.0, py in 0.0f64..3.0, pz in 0.0f64..2.0, axis in 0usize..3) {
            let v = random_volume([5, 4, 3], seed);
            let mut lmax = 0.0f64;
            for z in 0..3 { for y in 0..4 { for x in 0..5 {
                if x + 1 < 5 { lmax = lmax.max((v.get(x + 1, y, z) - v.get(x, y, z)).abs() as f64); }
                if y + 1 < 4 { lmax = lmax.max((v.get(x, y + 1, z) - v.get(x, y, z)).abs() as f64); }
                if z + 1 < 3 { lmax = lmax.max((v.get(x, y, z + 1) - v.get(x, y, z)).abs() as f64); }
            }}}
            let eps = 1e-4;
            let mut q = [px, py, pz];
            q[axis] += eps;
            let a = v.trilinear_sample(px, py, pz) as f64;
            let b = v.trilinear_sample(q[0], q[1], q[2]) as f64;
            // f32 output rounding adds at most one ulp at each end
            prop_assert!((a - b).abs() <= lmax * eps + 2.5e-7);
        }

        #[test]
        fn sampling_reproduces_ramps(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
                                     px in 0.0f64..5.0, py in 0.0f64..4.0, pz in 0.0f64..3.0) {
            let v = Volume3::from_fn([6, 5, 4], |x, y, z| (a * x as f64 + b * y as f64 + c * z as f64) as f32).unwrap();
            let exact = a * px + b * py + c * pz;
            prop_assert!((v.trilinear_sample(px, py, pz) as f64 - exact).abs() < 1e-6 * (1.0 + exact.abs()));
        }
    }
}
