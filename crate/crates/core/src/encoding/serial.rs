//! Binary serialization of lookup-table sets.
//!
//! Layout: an 8-byte magic, a little-endian `u32` version, six `u32`
//! dimension fields (mode tag, dim, components, domains, divisions_1d,
//! divisions_2d), then every parameter as little-endian `f64` in the
//! canonical order of [`LookupTableSet::flatten`]: shared entries (role,
//! then component or group and factor, then index, then channel) followed by
//! modulation scalars (role, domain, component or group and factor, index).

use std::io::{Read, Write};

use crate::encoding::{LookupTableSet, TableMode};
use crate::error::{Error, Result};

pub const TABLE_MAGIC: &[u8; 8] = b"VXTBL\0\0\0";
pub const TABLE_VERSION: u32 = 1;

fn mode_tag(mode: TableMode) -> u32 {
    match mode {
        TableMode::Base => 0,
        TableMode::DomainModulated => 1,
        TableMode::Vm => 2,
        TableMode::VmDomainModulated => 3,
    }
}

fn mode_from_tag(tag: u32) -> Result<TableMode> {
    match tag {
        0 => Ok(TableMode::Base),
        1 => Ok(TableMode::DomainModulated),
        2 => Ok(TableMode::Vm),
        3 => Ok(TableMode::VmDomainModulated),
        other => Err(Error::Data(format!("unknown table mode tag {other}"))),
    }
}

/// Writes a table set in the versioned binary layout.
pub fn write_tables<W: Write>(set: &LookupTableSet, w: &mut W) -> Result<()> {
    w.write_all(TABLE_MAGIC)?;
    for field in [
        TABLE_VERSION,
        mode_tag(set.mode()),
        set.dim() as u32,
        set.components() as u32,
        set.domains() as u32,
        set.divisions_1d() as u32,
        set.divisions_2d() as u32,
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    for v in set.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a table set written by [`write_tables`].
pub fn read_tables<R: Read>(r: &mut R) -> Result<LookupTableSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(Error::Data("bad table file magic".into()));
    }
    let version = read_u32(r)?;
    if version != TABLE_VERSION {
        return Err(Error::Data(format!(
            "unsupported table file version {version}"
        )));
    }
    let mode = mode_from_tag(read_u32(r)?)?;
    let dim = read_u32(r)? as usize;
    let components = read_u32(r)? as usize;
    let domains = read_u32(r)? as usize;
    let divisions_1d = read_u32(r)? as usize;
    let divisions_2d = read_u32(r)? as usize;
    let mut set = LookupTableSet::new(mode, dim, components, domains, divisions_1d, divisions_2d)?;
    let count = set.param_count();
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => {}
        _ => return Err(Error::Data("trailing bytes after table parameters".into())),
    }
    set.assign_flat(&values)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::TableMode;

    #[test]
    fn round_trips_every_mode() {
        for mode in TableMode::ALL {
            let mut set = LookupTableSet::new(mode, 6, 9, 2, 8, 4).unwrap();
            set.init(42);
            let mut bytes = Vec::new();
            write_tables(&set, &mut bytes).unwrap();
            let back = read_tables(&mut bytes.as_slice()).unwrap();
            assert_eq!(set, back);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut set = LookupTableSet::new(TableMode::Base, 4, 9, 1, 4, 4).unwrap();
        set.init(1);
        let mut bytes = Vec::new();
        write_tables(&set, &mut bytes).unwrap();
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(read_tables(&mut corrupted.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 4];
        assert!(read_tables(&mut &truncated[..]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(read_tables(&mut padded.as_slice()).is_err());
    }
}
