use std::path::Path;

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::Scalar;

pub const VFEA_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEA_VERSION: u32 = 1;

/// Contents of a feature file: `frames` rows of `dim` values, each row laid
/// out as motion features followed by appearance features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureFile {
    /// Splits rows into halves: the first `dim / 2` columns are motion.
    pub fn to_sequence<T: Scalar>(&self) -> Result<FeatureSequence<T>> {
        let rows: Vec<T> = self.data.iter().map(|&x| T::lit(x as f64)).collect();
        FeatureSequence::from_fused_rows(self.frames, self.dim, &rows, self.dim / 2)
    }
}

pub fn write_vfea(path: &Path, frames: usize, dim: usize, data: &[f32]) -> Result<()> {
    if data.len() != frames * dim {
        return Err(Error::Shape {
            op: "write_vfea",
            lhs: vec![frames, dim],
            rhs: vec![data.len()],
        });
    }
    let mut bytes = Vec::with_capacity(16 + 4 * data.len());
    bytes.extend_from_slice(VFEA_MAGIC);
    bytes.extend_from_slice(&VFEA_VERSION.to_le_bytes());
    for n in [frames, dim] {
        let n = u32::try_from(n).map_err(|_| Error::format(path, "dimension exceeds u32"))?;
        bytes.extend_from_slice(&n.to_le_bytes());
    }
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_vfea(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != VFEA_MAGIC {
        return Err(Error::format(path, "missing VFEA magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VFEA_VERSION {
        return Err(Error::format(path, format!("unsupported VFEA version {version}")));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header sizes overflow"))?;
    if bytes.len() - 16 != expected {
        return Err(Error::format(
            path,
            format!("{frames}×{dim} header needs {expected} payload bytes, found {}", bytes.len() - 16),
        ));
    }
    if frames == 0 || dim == 0 {
        return Err(Error::format(path, "empty feature matrix"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(FeatureFile { frames, dim, data })
}
