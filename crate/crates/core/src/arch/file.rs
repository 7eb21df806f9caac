//! `NGPW` weights files: magic, architecture hash, length, then f32 values,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use super::{ArchError, ArchSpec, FlatParams, Result};
use crate::binio::{read_array, read_f32s, read_u64, write_f32s, write_u64};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"NGPWv001";

pub fn encode_weights(flat: &FlatParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * flat.len());
    write_to(&mut out, flat).expect("writing to memory");
    out
}

fn write_to(w: &mut impl Write, flat: &FlatParams) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    write_u64(w, flat.arch_id())?;
    write_u64(w, flat.len() as u64)?;
    write_f32s(w, flat.values())
}

/// Parses weights and validates them against `arch`.
pub fn decode_weights(bytes: &[u8], arch: &ArchSpec) -> Result<FlatParams> {
    read_from(&mut Cursor::new(bytes), arch)
}

fn read_from(r: &mut impl Read, arch: &ArchSpec) -> Result<FlatParams> {
    let magic = read_array::<8>(r)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(ArchError::File(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let found = read_u64(r)?;
    if found != arch.id() {
        return Err(ArchError::ArchMismatch {
            expected: arch.id(),
            found,
        });
    }
    let n = read_u64(r)?;
    if n != arch.param_count() as u64 {
        return Err(ArchError::Length {
            expected: arch.param_count(),
            got: n as usize,
            first_segment: 0,
        });
    }
    let values = read_f32s(r, n as usize)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ArchError::File("trailing bytes after weights".into()));
    }
    FlatParams::new(arch, values)
}

pub fn write_weights(path: &Path, flat: &FlatParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, flat)?;
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path, arch: &ArchSpec) -> Result<FlatParams> {
    read_from(&mut BufReader::new(File::open(path)?), arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_arch, ArchKind};

    #[test]
    fn header_layout() {
        let arch = builtin_arch(ArchKind::Mlp, &[2], 2).unwrap();
        let flat = FlatParams::zeros(&arch);
        let bytes = encode_weights(&flat);
        assert_eq!(&bytes[..8], b"NGPWv001");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), arch.id());
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), arch.param_count() as u64);
        assert_eq!(bytes.len(), 24 + 4 * arch.param_count());
    }

    #[test]
    fn foreign_arch_is_rejected() {
        let a = builtin_arch(ArchKind::Mlp, &[2], 2).unwrap();
        let b = builtin_arch(ArchKind::Mlp, &[2], 3).unwrap();
        let bytes = encode_weights(&FlatParams::zeros(&a));
        assert!(matches!(decode_weights(&bytes, &b), Err(ArchError::ArchMismatch { .. })));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let a = builtin_arch(ArchKind::Mlp, &[2], 2).unwrap();
        let bytes = encode_weights(&FlatParams::zeros(&a));
        assert!(decode_weights(&bytes[..bytes.len() - 1], &a).is_err());
    }
}
