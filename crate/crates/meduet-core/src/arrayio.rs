//! On-disk array formats.
//!
//! Two conventions, both little-endian:
//!
//! * Bulk voxel/latent data: a flat `.f32` file of raw 32-bit floats next to
//!   a `.json` sidecar describing shape and provenance (the sidecar types
//!   live with their owning modules).
//! * Checkpoints: a single container of named f64 matrices,
//!   magic `MDAR`, u32 version, u32 entry count, then per entry
//!   u32 name length, UTF-8 name, u64 rows, u64 cols, rows*cols f64 values.
//!   Entries are sorted by name so identical states hash identically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MDAR";
const VERSION: u32 = 1;

pub fn write_f32_raw(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f32_raw(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::MissingPrerequisite(format!("{}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_array_container(path: &Path, entries: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, arr) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        let (r, c) = arr.dim();
        w.write_all(&(r as u64).to_le_bytes())?;
        w.write_all(&(c as u64).to_le_bytes())?;
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_array_container(path: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::MissingPrerequisite(format!("{}: {}", path.display(), e))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "{}: bad magic {:?}, not an array container",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported container version {}",
            path.display(),
            version
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Config(format!("container entry name: {}", e)))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Config(format!("container entry {}: {}", name, e)))?;
        out.insert(name, arr);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Hex SHA-256 of a byte slice.
pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn f32_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.f32");
        let data = vec![0.0f32, -1.5, 3.25, f32::MIN_POSITIVE];
        write_f32_raw(&path, &data).unwrap();
        assert_eq!(read_f32_raw(&path).unwrap(), data);
    }

    #[test]
    fn container_round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mdar");
        let mut entries = BTreeMap::new();
        entries.insert("w".to_string(), array![[1.0, 2.0], [3.0, -4.0]]);
        entries.insert("b".to_string(), array![[1e-300, 0.1 + 0.2]]);
        write_array_container(&path, &entries).unwrap();
        let back = read_array_container(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (name, arr) in &entries {
            for (a, b) in arr.iter().zip(back[name].iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn identical_states_hash_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mdar");
        let p2 = dir.path().join("b.mdar");
        let mut entries = BTreeMap::new();
        entries.insert("x".to_string(), array![[0.5, 0.25]]);
        write_array_container(&p1, &entries).unwrap();
        write_array_container(&p2, &entries).unwrap();
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mdar");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            read_array_container(&path),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_file_is_a_prerequisite_error() {
        assert!(matches!(
            read_f32_raw(Path::new("/nonexistent/v.f32")),
            Err(Error::MissingPrerequisite(_))
        ));
    }
}
