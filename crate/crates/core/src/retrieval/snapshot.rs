//! `.hki` index snapshots.
//!
//! Layout: magic, u32 version, u64 length + embedded `.hke` bytes, u64
//! length + JSON side tables, u8 abundance flag, then (rows u64, cols u64,
//! f64 payload) when the flag is set, and a trailing CRC-32 of everything
//! before it.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::EmbeddingIndex;
use crate::error::{AtlasError, FormatError, Result};
use crate::ingest::{decode_embeddings, encode_embeddings};

pub const INDEX_MAGIC: [u8; 4] = *b"HKIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SideTables {
    labels: BTreeMap<String, Vec<Option<String>>>,
    channels: Vec<String>,
    regions: Option<Vec<String>>,
}

pub fn encode_index(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    let hke = encode_embeddings(&index.matrix);
    out.extend_from_slice(&(hke.len() as u64).to_le_bytes());
    out.extend_from_slice(&hke);
    let side = SideTables {
        labels: index.labels.clone(),
        channels: index.channels.clone(),
        regions: index.regions.clone(),
    };
    let json = serde_json::to_vec(&side).expect("side tables serialize");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    match &index.abundance {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize, FormatError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| FormatError::ShapeMismatch(format!("length {v} too large")))
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<EmbeddingIndex> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            needed: 12,
            available: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != INDEX_MAGIC {
        return Err(FormatError::BadMagic {
            expected: INDEX_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != INDEX_VERSION {
        return Err(AtlasError::Integrity(format!(
            "index snapshot version {version} cannot be read by this build (expects {INDEX_VERSION}); rebuild it with `atlas index build`"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(AtlasError::Integrity(format!(
            "index checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hke_len = r.u64()?;
    let matrix = decode_embeddings(r.take(hke_len)?)?;
    let json_len = r.u64()?;
    let side: SideTables = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| AtlasError::Integrity(format!("index side tables: {e}")))?;
    let mut index = EmbeddingIndex::build(&matrix)?;
    // Stored rows are already unit norm; keep them bit-exact.
    index.matrix = matrix;
    index = index.with_labels(side.labels)?;
    if let Some(regions) = side.regions {
        index = index.with_regions(regions)?;
    }
    match r.take(1)?[0] {
        0 => {
            if !side.channels.is_empty() {
                return Err(AtlasError::Integrity("channels listed without an abundance table".into()));
            }
        }
        1 => {
            let rows = r.u64()?;
            let cols = r.u64()?;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| FormatError::ShapeMismatch("abundance table too large".into()))?;
            let data: Vec<f64> = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let table =
                Array2::from_shape_vec((rows, cols), data).map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
            index = index.with_abundance(side.channels, table)?;
        }
        other => return Err(AtlasError::Integrity(format!("bad abundance flag {other}"))),
    }
    if r.pos != body.len() {
        return Err(FormatError::ShapeMismatch(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    Ok(index)
}

pub fn save_index(index: &EmbeddingIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_index(index)).map_err(|e| AtlasError::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AtlasError::io(path, e))?;
    decode_index(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EmbeddingMatrix, Modality};

    fn fixture(n: usize) -> EmbeddingIndex {
        let rows = Array2::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f32 - 5.0);
        let ids = (0..n).map(|i| format!("p{i:03}")).collect();
        let idx = EmbeddingIndex::build(&EmbeddingMatrix::new(Modality::Mif, rows, ids).unwrap()).unwrap();
        let mut labels = BTreeMap::new();
        labels.insert(
            "disease".to_string(),
            (0..n).map(|i| (i % 3 != 0).then(|| format!("d{}", i % 2))).collect(),
        );
        let table = Array2::from_shape_fn((n, 2), |(i, j)| if (i + j) % 5 == 0 { f64::NAN } else { (i * j) as f64 });
        idx.with_labels(labels)
            .unwrap()
            .with_abundance(vec!["CD8".into(), "Ki67".into()], table)
            .unwrap()
            .with_regions((0..n).map(|i| format!("r{}", i / 10)).collect())
            .unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let idx = fixture(100);
        let bytes = encode_index(&idx);
        let back = decode_index(&bytes).unwrap();
        assert_eq!(back.embeddings(), idx.embeddings());
        assert_eq!(back.labels(), idx.labels());
        assert_eq!(back.regions(), idx.regions());
        let (a, b) = (back.abundance().unwrap(), idx.abundance().unwrap());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(encode_index(&back), bytes);
    }

    #[test]
    fn empty_index_roundtrips() {
        let idx = fixture(0);
        let back = decode_index(&encode_index(&idx)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn snapshot_checksum_is_stable() {
        // Golden checksum of the 100-row fixture; changes mean the format changed.
        let bytes = encode_index(&fixture(100));
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
        assert_eq!(format!("{crc:08x}"), GOLDEN_CRC);
    }

    const GOLDEN_CRC: &str = "0cc43c36";

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_index(&fixture(20));
        assert!(matches!(decode_index(&bytes[..bytes.len() - 9]), Err(AtlasError::Integrity(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_index(&flipped), Err(AtlasError::Integrity(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_index(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        assert!(matches!(
            decode_index(b"HKEM\x01\0\0\0\0\0\0\0\0\0"),
            Err(AtlasError::Format(FormatError::BadMagic { .. }))
        ));
    }
}
