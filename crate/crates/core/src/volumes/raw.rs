//! Raw little-endian voxel data with a JSON header, for tests and tooling.
//!
//! `name.json` holds `{shape, spacing_mm, affine, dtype}`; voxels live in
//! `name.raw`, `x` fastest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::Affine;
use crate::volumes::{voxel_sizes, LoadedVolume, RawData};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    affine: [[f64; 4]; 4],
    dtype: String,
}

fn data_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_raw(path: &Path, dims: [usize; 3], data: &RawData, affine: &Affine) -> Result<()> {
    let (dtype, bytes) = match data {
        RawData::F32(v) => ("float32", v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>()),
        RawData::U32(v) => ("uint32", v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    let header = RawHeader {
        shape: dims,
        spacing_mm: voxel_sizes(affine),
        affine: *affine.matrix(),
        dtype: dtype.into(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&header)?)?;
    std::fs::write(data_path(path), bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<LoadedVolume> {
    let header: RawHeader = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let m = header.affine;
    if m[3] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::Parse("affine last row must be (0, 0, 0, 1)".into()));
    }
    let affine = Affine::from_rows([m[0], m[1], m[2]]);
    let n: usize = header.shape.iter().product();
    let bytes = std::fs::read(data_path(path))?;
    if bytes.len() != 4 * n {
        return Err(Error::Parse(format!(
            "expected {} data bytes, found {}",
            4 * n,
            bytes.len()
        )));
    }
    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match header.dtype.as_str() {
        "float32" => RawData::F32(words.map(f32::from_le_bytes).collect()),
        "uint32" => RawData::U32(words.map(u32::from_le_bytes).collect()),
        other => return Err(Error::Parse(format!("unknown dtype {other}"))),
    };
    Ok(LoadedVolume {
        dims: header.shape,
        data,
        affine,
    })
}
