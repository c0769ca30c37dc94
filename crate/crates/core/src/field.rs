//! Per-voxel displacement fields and the DDNF file format.

use std::path::Path;

use crate::binio::{checked_volume, put_f32s, put_u32, write_file, ByteReader};
use crate::error::{DdnError, Result};

pub const DDNF_MAGIC: &[u8; 4] = b"DDNF";
pub const DDNF_VERSION: u32 = 1;

/// Displacement `u(p)` in voxel units; the warped image is `source(p + u(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    /// x, y and z components, each x-fastest.
    components: [Vec<f32>; 3],
}

impl DisplacementField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        DisplacementField {
            dims,
            components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn constant(dims: [usize; 3], u: [f32; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        DisplacementField {
            dims,
            components: [vec![u[0]; n], vec![u[1]; n], vec![u[2]; n]],
        }
    }

    pub fn new(dims: [usize; 3], components: [Vec<f32>; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(DdnError::shape(format!("dims must be >= 1, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if components.iter().any(|c| c.len() != n) {
            return Err(DdnError::shape(format!(
                "field components must each hold {n} values"
            )));
        }
        if components.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DdnError::Numeric("displacement field is not finite".into()));
        }
        Ok(DisplacementField { dims, components })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.components[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn component(&self, axis: usize) -> &[f32] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f32>; 3] {
        &self.components
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f32; 3] {
        [
            self.components[0][i],
            self.components[1][i],
            self.components[2][i],
        ]
    }

    pub fn max_abs(&self) -> f32 {
        self.components
            .iter()
            .flatten()
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn to_ddnf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 12 * self.len());
        out.extend_from_slice(DDNF_MAGIC);
        put_u32(&mut out, DDNF_VERSION);
        for d in self.dims {
            put_u32(&mut out, d as u32);
        }
        for c in &self.components {
            put_f32s(&mut out, c);
        }
        out
    }

    pub fn from_ddnf_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DDNF_MAGIC)?;
        r.version(DDNF_VERSION)?;
        let dims_at = r.offset();
        let dims = [r.u32("dx")?, r.u32("dy")?, r.u32("dz")?];
        if dims.contains(&0) {
            return Err(DdnError::format(dims_at, format!("zero extent in {dims:?}")));
        }
        let n = checked_volume(dims, dims_at)?;
        let ux = r.f32_vec(n, "ux")?;
        let uy = r.f32_vec(n, "uy")?;
        let uz = r.f32_vec(n, "uz")?;
        r.finish()?;
        DisplacementField::new(
            [dims[0] as usize, dims[1] as usize, dims[2] as usize],
            [ux, uy, uz],
        )
    }
}

pub fn save_field(field: &DisplacementField, path: &Path) -> Result<()> {
    write_file(path, &field.to_ddnf_bytes())
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    DisplacementField::from_ddnf_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ddnf_round_trip(dx in 1usize..5, dy in 1usize..5, dz in 1usize..5, vals in proptest::collection::vec(-20.0f32..20.0, 3 * 64)) {
            let n = dx * dy * dz;
            let f = DisplacementField::new([dx, dy, dz], [
                vals[..n].to_vec(), vals[64..64 + n].to_vec(), vals[128..128 + n].to_vec()
            ]).unwrap();
            let bytes = f.to_ddnf_bytes();
            prop_assert_eq!(bytes.len(), 20 + 12 * n);
            prop_assert_eq!(DisplacementField::from_ddnf_bytes(&bytes).unwrap(), f);
        }
    }

    #[test]
    fn rejects_non_finite_and_truncation() {
        assert!(DisplacementField::new([1, 1, 1], [vec![f32::NAN], vec![0.0], vec![0.0]]).is_err());
        let bytes = DisplacementField::constant([2, 2, 2], [1.0, 2.0, 3.0]).to_ddnf_bytes();
        assert!(matches!(
            DisplacementField::from_ddnf_bytes(&bytes[..bytes.len() - 1]),
            Err(DdnError::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(
            DisplacementField::from_ddnf_bytes(&bad),
            Err(DdnError::Format { offset: 0, .. })
        ));
    }
}
