//! Binary feature-dump format.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u32` level count,
//! then per level: `u32` voxel count, `u32` channel count, the voxel
//! coordinates as signed 32-bit little-endian triples, and the features as
//! 32-bit floats, row-major.

use voxelform::encoder::LevelFeatures;
use voxelform::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 8] = b"VXFEAT\0\0";
pub const DUMP_VERSION: u32 = 1;

pub struct DumpLevel {
    pub coords: Vec<[i32; 3]>,
    pub features: Vec<Vec<f32>>,
}

pub fn write_dump(levels: &[LevelFeatures]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(levels.len() as u32).to_le_bytes());
    for level in levels {
        let channels = level.features.first().map(|f| f.len()).unwrap_or(0);
        out.extend_from_slice(&(level.coords.len() as u32).to_le_bytes());
        out.extend_from_slice(&(channels as u32).to_le_bytes());
        for coord in &level.coords {
            for &c in coord {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for row in &level.features {
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn read_dump(bytes: &[u8]) -> Result<Vec<DumpLevel>> {
    let mut cursor = 0usize;
    let take = |len: usize, cursor: &mut usize| -> Result<&[u8]> {
        if *cursor + len > bytes.len() {
            return Err(Error::Data("truncated feature dump".into()));
        }
        let s = &bytes[*cursor..*cursor + len];
        *cursor += len;
        Ok(s)
    };
    if take(8, &mut cursor)? != DUMP_MAGIC {
        return Err(Error::Data("bad feature dump magic".into()));
    }
    let version = u32::from_le_bytes(take(4, &mut cursor)?.try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::Data(format!("unsupported dump version {version}")));
    }
    let level_count = u32::from_le_bytes(take(4, &mut cursor)?.try_into().unwrap()) as usize;
    let mut levels = Vec::with_capacity(level_count);
    for _ in 0..level_count {
        let count = u32::from_le_bytes(take(4, &mut cursor)?.try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(take(4, &mut cursor)?.try_into().unwrap()) as usize;
        let mut coords = Vec::with_capacity(count);
        for _ in 0..count {
            let mut coord = [0i32; 3];
            for c in coord.iter_mut() {
                *c = i32::from_le_bytes(take(4, &mut cursor)?.try_into().unwrap());
            }
            coords.push(coord);
        }
        let mut features = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = Vec::with_capacity(channels);
            for _ in 0..channels {
                row.push(f32::from_le_bytes(take(4, &mut cursor)?.try_into().unwrap()));
            }
            features.push(row);
        }
        levels.push(DumpLevel { coords, features });
    }
    if cursor != bytes.len() {
        return Err(Error::Data("trailing bytes in feature dump".into()));
    }
    Ok(levels)
}
