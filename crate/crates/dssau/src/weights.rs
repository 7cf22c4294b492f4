//! Weight container: a small binary format holding named f32 tensors.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic "DSSW" | version u16 | entry_count u32
//! per entry: name_len u16 | name UTF-8 | dtype u8 (0 = f32) | rank u8
//!            | extents u64 x rank | offset u64 | byte_len u64
//! header crc32 u32              (over every preceding byte)
//! payload                       (each tensor at a 64-byte-aligned offset)
//! ```
//!
//! Offsets are absolute file positions. Loading rejects wrong magic or
//! version, a corrupt header CRC, duplicate names, and overlapping or
//! out-of-bounds payload ranges; a round trip is bitwise lossless.

use crate::tensor::Tensor;
use std::fmt;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DSSW";
pub const VERSION: u16 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum ContainerError {
    BadMagic([u8; 4]),
    BadVersion(u16),
    BadCrc { stored: u32, computed: u32 },
    DuplicateName(String),
    BadLayout(String),
    UnsupportedDtype(u8),
    MissingTensor(String),
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    Truncated,
    Io(String),
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic(m) => write!(f, "bad magic {m:?}, expected \"DSSW\""),
            Self::BadVersion(v) => write!(f, "unsupported container version {v}"),
            Self::BadCrc { stored, computed } => write!(
                f,
                "header crc mismatch: stored {stored:#010x}, computed {computed:#010x}"
            ),
            Self::DuplicateName(n) => write!(f, "duplicate tensor name '{n}'"),
            Self::BadLayout(m) => write!(f, "bad container layout: {m}"),
            Self::UnsupportedDtype(d) => write!(f, "unsupported dtype code {d}"),
            Self::MissingTensor(n) => write!(f, "tensor '{n}' missing from container"),
            Self::ShapeMismatch { name, expected, got } => write!(
                f,
                "tensor '{name}': expected shape {expected:?}, container has {got:?}"
            ),
            Self::Truncated => write!(f, "container truncated"),
            Self::Io(m) => write!(f, "container io: {m}"),
        }
    }
}

impl std::error::Error for ContainerError {}

// ── CRC32 (IEEE) ───────────────────────────────────────────────────────────

fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

// ── Save / load ────────────────────────────────────────────────────────────

/// Serialize named f32 tensors. Order is preserved.
pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<(), ContainerError> {
    let mut names = std::collections::HashSet::new();
    for (name, _) in entries {
        if !names.insert(name.as_str()) {
            return Err(ContainerError::DuplicateName(name.clone()));
        }
    }
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(entries.len() as u32).to_le_bytes());

    // Entry table size is known up front, so payload offsets can be fixed
    // before writing: per entry 2 + name + 1 + 1 + 8*rank + 8 + 8 bytes.
    let table_len: usize = entries
        .iter()
        .map(|(n, t)| 2 + n.len() + 2 + 8 * t.rank() + 16)
        .sum();
    let header_len = header.len() + table_len + 4; // + crc
    let mut cursor = header_len.div_ceil(ALIGN) * ALIGN;
    let mut spans = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        let byte_len = t.numel() * 4;
        spans.push((cursor, byte_len));
        header.extend_from_slice(&(name.len() as u16).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(0); // dtype f32
        header.push(t.rank() as u8);
        for &e in t.shape() {
            header.extend_from_slice(&(e as u64).to_le_bytes());
        }
        header.extend_from_slice(&(cursor as u64).to_le_bytes());
        header.extend_from_slice(&(byte_len as u64).to_le_bytes());
        cursor = (cursor + byte_len).div_ceil(ALIGN) * ALIGN;
    }
    let crc = crc32(&header);
    header.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(header.len(), header_len);

    let total = spans
        .last()
        .map(|&(off, len)| off + len)
        .unwrap_or(header_len);
    let mut file = vec![0u8; total];
    file[..header.len()].copy_from_slice(&header);
    for ((_, t), &(off, len)) in entries.iter().zip(&spans) {
        let data = t.data();
        let bytes = &mut file[off..off + len];
        for (i, &v) in data.iter().enumerate() {
            bytes[i * 4..(i + 1) * 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, file).map_err(|e| ContainerError::Io(e.to_string()))
}

/// Deserialize every tensor, in stored order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, ContainerError> {
    let bytes = fs::read(path).map_err(|e| ContainerError::Io(e.to_string()))?;
    let take = |off: usize, len: usize| -> Result<&[u8], ContainerError> {
        bytes.get(off..off + len).ok_or(ContainerError::Truncated)
    };
    let magic: [u8; 4] = take(0, 4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let count = u32::from_le_bytes(take(6, 4)?.try_into().unwrap()) as usize;
    let mut pos = 10;
    let mut metas = Vec::with_capacity(count);
    let mut names = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap()) as usize;
        pos += 2;
        let name = String::from_utf8(take(pos, name_len)?.to_vec())
            .map_err(|_| ContainerError::BadLayout("non-UTF-8 name".into()))?;
        pos += name_len;
        if !names.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }
        let dtype = take(pos, 1)?[0];
        if dtype != 0 {
            return Err(ContainerError::UnsupportedDtype(dtype));
        }
        let rank = take(pos + 1, 1)?[0] as usize;
        pos += 2;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize);
            pos += 8;
        }
        let offset = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
        let byte_len = u64::from_le_bytes(take(pos + 8, 8)?.try_into().unwrap()) as usize;
        pos += 16;
        metas.push((name, shape, offset, byte_len));
    }
    let stored = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap());
    let computed = crc32(&bytes[..pos]);
    if stored != computed {
        return Err(ContainerError::BadCrc { stored, computed });
    }
    let header_end = pos + 4;

    // Payload spans: in-bounds, past the header, non-overlapping.
    let mut spans: Vec<(usize, usize)> = metas.iter().map(|m| (m.2, m.3)).collect();
    spans.sort();
    let mut prev_end = header_end;
    for &(off, len) in &spans {
        if off < prev_end {
            return Err(ContainerError::BadLayout(format!(
                "payload at {off} overlaps preceding bytes ending at {prev_end}"
            )));
        }
        if off % ALIGN != 0 {
            return Err(ContainerError::BadLayout(format!(
                "payload offset {off} not {ALIGN}-byte aligned"
            )));
        }
        if off + len > bytes.len() {
            return Err(ContainerError::Truncated);
        }
        prev_end = off + len;
    }

    let mut out = Vec::with_capacity(count);
    for (name, shape, offset, byte_len) in metas {
        let expected: usize = shape.iter().product::<usize>() * 4;
        if expected != byte_len {
            return Err(ContainerError::BadLayout(format!(
                "tensor '{name}': byte length {byte_len} does not match shape {shape:?}"
            )));
        }
        let raw = take(offset, byte_len)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(data, &shape)
            .map_err(|e| ContainerError::BadLayout(e.to_string()))?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Copy container values into existing named parameters; every parameter
/// must be present with the exact shape.
pub fn load_into(
    path: &Path,
    params: &[(String, Tensor<f32>)],
) -> Result<(), ContainerError> {
    let loaded = load(path)?;
    let by_name: std::collections::HashMap<&str, &Tensor<f32>> =
        loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, param) in params {
        let src = by_name
            .get(name.as_str())
            .ok_or_else(|| ContainerError::MissingTensor(name.clone()))?;
        if src.shape() != param.shape() {
            return Err(ContainerError::ShapeMismatch {
                name: name.clone(),
                expected: param.shape().to_vec(),
                got: src.shape().to_vec(),
            });
        }
        param.data_mut().copy_from_slice(&src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;

    fn tmpdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!(
            "dssau_weights_{}_{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos()
        ));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn roundtrip_is_bitwise_lossless() {
        let dir = tmpdir();
        let path = dir.join("w.dssw");
        let entries = vec![
            ("a.weight".to_string(), rand_tensor::<f32>(&[3, 4], 700)),
            ("a.bias".to_string(), rand_tensor::<f32>(&[4], 701)),
            ("scalar".to_string(), Tensor::scalar(0.25f32)),
        ];
        save(&path, &entries).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let (a, b) = (t0.to_vec(), t1.to_vec());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tmpdir();
        let entries = vec![("x".to_string(), rand_tensor::<f32>(&[5, 5], 702))];
        let (p1, p2) = (dir.join("a.dssw"), dir.join("b.dssw"));
        save(&p1, &entries).unwrap();
        save(&p2, &entries).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rejects_corrupted_magic_version_and_crc() {
        let dir = tmpdir();
        let path = dir.join("w.dssw");
        save(&path, &[("x".to_string(), rand_tensor::<f32>(&[2, 2], 703))]).unwrap();

        let pristine = fs::read(&path).unwrap();
        let mut bad = pristine.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(ContainerError::BadMagic(_))));

        let mut bad = pristine.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(ContainerError::BadVersion(9))));

        let mut bad = pristine.clone();
        bad[12] ^= 0x01; // nudge the tensor name; still valid UTF-8
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(ContainerError::BadCrc { .. })));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rejects_overlapping_offsets() {
        let dir = tmpdir();
        let path = dir.join("w.dssw");
        let t = rand_tensor::<f32>(&[16], 704);
        save(&path, &[("a".to_string(), t.clone()), ("b".to_string(), t)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // point entry b's offset at entry a's payload; entry table layout:
        // 10 + (2+1+2+8+16) for 'a', then 2+1 into 'b', dtype+rank, extents(8)
        let b_offset_pos = 10 + (2 + 1 + 2 + 8 + 16) + (2 + 1 + 2 + 8);
        let a_offset_pos = 10 + (2 + 1 + 2 + 8);
        let a_off = u64::from_le_bytes(bytes[a_offset_pos..a_offset_pos + 8].try_into().unwrap());
        bytes[b_offset_pos..b_offset_pos + 8].copy_from_slice(&a_off.to_le_bytes());
        // refresh the crc so only the overlap check can reject
        let crc_pos = 10 + 2 * (2 + 1 + 2 + 8 + 16);
        let crc = crc32(&bytes[..crc_pos]);
        bytes[crc_pos..crc_pos + 4].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(ContainerError::BadLayout(_))));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let dir = tmpdir();
        let path = dir.join("w.dssw");
        save(&path, &[("p".to_string(), rand_tensor::<f32>(&[2, 3], 705))]).unwrap();
        let target = vec![("p".to_string(), Tensor::<f32>::zeros(&[2, 3]).with_grad())];
        load_into(&path, &target).unwrap();
        assert_ne!(target[0].1.to_vec(), vec![0.0; 6]);

        let wrong_shape = vec![("p".to_string(), Tensor::<f32>::zeros(&[3, 2]))];
        assert!(matches!(
            load_into(&path, &wrong_shape),
            Err(ContainerError::ShapeMismatch { .. })
        ));
        let missing = vec![("q".to_string(), Tensor::<f32>::zeros(&[2, 3]))];
        assert!(matches!(
            load_into(&path, &missing),
            Err(ContainerError::MissingTensor(_))
        ));
        fs::remove_dir_all(dir).unwrap();
    }
}
