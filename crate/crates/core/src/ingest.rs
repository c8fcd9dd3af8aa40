//! Data model, manifest and embedding file I/O, patient-level splitting and
//! the synthetic cohort generator used in place of real encoders.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, FormatError, Result};
use crate::preprocess::PatchCoord;

mod synth;

pub use synth::{synth_cohort, SynthCohort, SynthConfig, SyntheticProvider, PANEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurvivalStatus {
    Alive,
    Deceased,
}

impl fmt::Display for SurvivalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurvivalStatus::Alive => f.write_str("Alive"),
            SurvivalStatus::Deceased => f.write_str("Deceased"),
        }
    }
}

/// Slice-level clinical context. Absent optional fields are written as
/// explicit `null`s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalMetadata {
    pub organ_type: String,
    pub disease: String,
    pub tissue_type: String,
    pub t_stage: Option<String>,
    pub n_stage: Option<String>,
    pub m_stage: Option<String>,
    pub grade: Option<String>,
    pub survival_status: Option<SurvivalStatus>,
    pub survival_months: Option<f64>,
    pub treatment_response: Option<bool>,
    pub annotation: Option<String>,
}

impl ClinicalMetadata {
    pub fn new(organ_type: &str, disease: &str, tissue_type: &str) -> Self {
        ClinicalMetadata {
            organ_type: organ_type.to_string(),
            disease: disease.to_string(),
            tissue_type: tissue_type.to_string(),
            t_stage: None,
            n_stage: None,
            m_stage: None,
            grade: None,
            survival_status: None,
            survival_months: None,
            treatment_response: None,
            annotation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.survival_months.is_some() && self.survival_status.is_none() {
            return Err(AtlasError::Integrity(
                "survival_months present without survival_status".into(),
            ));
        }
        if let Some(m) = self.survival_months {
            if !(m.is_finite() && m >= 0.0) {
                return Err(AtlasError::Integrity(format!(
                    "survival_months must be a non-negative number, got {m}"
                )));
            }
        }
        for (field, prefix, value) in [
            ("t_stage", 'T', &self.t_stage),
            ("n_stage", 'N', &self.n_stage),
            ("m_stage", 'M', &self.m_stage),
        ] {
            if let Some(v) = value {
                if !is_stage_token(v, prefix) {
                    return Err(AtlasError::Integrity(format!(
                        "{field} {v:?} does not match {prefix}\\w+"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `T\w+`-style check: the prefix letter followed by at least one word character.
pub fn is_stage_token(s: &str, prefix: char) -> bool {
    let mut chars = s.chars();
    chars.next() == Some(prefix)
        && s.len() > 1
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_id: String,
    pub patient_id: String,
    pub channels: Vec<String>,
    /// `None` when the slice has no clinical record at all.
    pub metadata: Option<ClinicalMetadata>,
    #[serde(default = "yes")]
    pub has_he: bool,
    #[serde(default = "yes")]
    pub has_text: bool,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default)]
    pub width: Option<u32>,
}

fn yes() -> bool {
    true
}

impl SliceRecord {
    pub fn has_metadata(&self) -> bool {
        self.metadata.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slice_id: String,
    #[serde(default)]
    pub coord: Option<PatchCoord>,
    /// Per-channel mean abundance on the 0-255 normalized scale.
    pub means: Vec<f64>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub metadata_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Slice(SliceRecord),
    Patch(PatchRecord),
}

/// An immutable set of slices and their patches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub slices: Vec<SliceRecord>,
    pub patches: Vec<PatchRecord>,
}

impl Dataset {
    /// Builds a dataset and checks every cross-record invariant.
    pub fn new(slices: Vec<SliceRecord>, patches: Vec<PatchRecord>) -> Result<Self> {
        let ds = Dataset { slices, patches };
        ds.validate()?;
        Ok(ds)
    }

    pub fn slice(&self, slice_id: &str) -> Option<&SliceRecord> {
        self.slices.iter().find(|s| s.slice_id == slice_id)
    }

    pub fn slice_index(&self) -> HashMap<&str, &SliceRecord> {
        self.slices.iter().map(|s| (s.slice_id.as_str(), s)).collect()
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.slices.iter().map(|s| s.patient_id.as_str()).collect()
    }

    /// Slice metadata of a patch, if both exist.
    pub fn patch_metadata(&self, patch: &PatchRecord) -> Option<&ClinicalMetadata> {
        self.slice(&patch.slice_id).and_then(|s| s.metadata.as_ref())
    }

    fn validate(&self) -> Result<()> {
        let mut slices: HashMap<&str, &SliceRecord> = HashMap::new();
        for s in &self.slices {
            if slices.insert(&s.slice_id, s).is_some() {
                return Err(AtlasError::Integrity(format!(
                    "duplicate slice_id {:?}",
                    s.slice_id
                )));
            }
            let mut seen = HashSet::new();
            for c in &s.channels {
                if !seen.insert(c) {
                    return Err(AtlasError::Integrity(format!(
                        "channel {c:?} repeated in slice {:?}",
                        s.slice_id
                    )));
                }
            }
            if let Some(m) = &s.metadata {
                m.validate().map_err(|e| {
                    AtlasError::Integrity(format!("slice {:?}: {e}", s.slice_id))
                })?;
            }
        }
        let mut patch_ids = HashSet::new();
        for p in &self.patches {
            if !patch_ids.insert(p.patch_id.as_str()) {
                return Err(AtlasError::Integrity(format!(
                    "duplicate patch_id {:?}",
                    p.patch_id
                )));
            }
            let slice = slices.get(p.slice_id.as_str()).ok_or_else(|| {
                AtlasError::Integrity(format!(
                    "patch {:?} references unknown slice_id {:?}",
                    p.patch_id, p.slice_id
                ))
            })?;
            if p.means.len() != slice.channels.len() {
                return Err(AtlasError::Integrity(format!(
                    "patch {:?} has {} channel means, slice {:?} has {} channels",
                    p.patch_id,
                    p.means.len(),
                    slice.slice_id,
                    slice.channels.len()
                )));
            }
            if let (Some(c), Some(h), Some(w)) = (&p.coord, slice.height, slice.width) {
                if c.x_right > w as usize || c.y_top > h as usize {
                    return Err(AtlasError::Integrity(format!(
                        "patch {:?} lies outside slice {:?} ({w}x{h})",
                        p.patch_id, slice.slice_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads a line-delimited manifest. Blank lines are ignored.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| AtlasError::io(path, e))?;
    read_manifest(std::io::BufReader::new(file))
}

pub fn read_manifest(reader: impl BufRead) -> Result<Dataset> {
    let mut slices = Vec::new();
    let mut patches = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AtlasError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestLine = serde_json::from_str(&line).map_err(|e| AtlasError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match record {
            ManifestLine::Slice(s) => slices.push(s),
            ManifestLine::Patch(p) => patches.push(p),
        }
    }
    Dataset::new(slices, patches)
}

pub fn write_manifest(dataset: &Dataset, mut writer: impl Write) -> std::io::Result<()> {
    for s in &dataset.slices {
        let line = serde_json::to_string(&ManifestLine::Slice(s.clone()))?;
        writeln!(writer, "{line}")?;
    }
    for p in &dataset.patches {
        let line = serde_json::to_string(&ManifestLine::Patch(p.clone()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn save_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| AtlasError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_manifest(dataset, &mut w).map_err(|e| AtlasError::io(path, e))?;
    w.flush().map_err(|e| AtlasError::io(path, e))
}

/// Partitions slices (and their patches) so that no patient is on both sides.
///
/// The number of test patients is `round(test_fraction * n_patients)`.
pub fn split_patients(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(AtlasError::Argument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if let Some(s) = dataset.slices.iter().find(|s| s.patient_id.is_empty()) {
        return Err(AtlasError::Argument(format!(
            "slice {:?} has no patient_id",
            s.slice_id
        )));
    }
    let mut patients: Vec<&str> = dataset.patient_ids().into_iter().collect();
    let n_test = (test_fraction * patients.len() as f64).round() as usize;
    let mut rng = crate::rng::substream(seed, "split_patients");
    patients.shuffle(&mut rng);
    let test_patients: HashSet<&str> = patients[..n_test].iter().copied().collect();

    let (test_slices, train_slices): (Vec<_>, Vec<_>) = dataset
        .slices
        .iter()
        .cloned()
        .partition(|s| test_patients.contains(s.patient_id.as_str()));
    let test_ids: HashSet<&str> = test_slices.iter().map(|s| s.slice_id.as_str()).collect();
    let (test_patches, train_patches): (Vec<_>, Vec<_>) = dataset
        .patches
        .iter()
        .cloned()
        .partition(|p| test_ids.contains(p.slice_id.as_str()));
    Ok((
        Dataset {
            slices: train_slices,
            patches: train_patches,
        },
        Dataset {
            slices: test_slices,
            patches: test_patches,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    He,
    Mif,
    Txt,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::He, Modality::Mif, Modality::Txt];

    pub fn tag(self) -> u8 {
        match self {
            Modality::He => 0,
            Modality::Mif => 1,
            Modality::Txt => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, FormatError> {
        match tag {
            0 => Ok(Modality::He),
            1 => Ok(Modality::Mif),
            2 => Ok(Modality::Txt),
            t => Err(FormatError::UnknownModality(t)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::He => "he",
            Modality::Mif => "mif",
            Modality::Txt => "txt",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = AtlasError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "he" | "h&e" => Ok(Modality::He),
            "mif" => Ok(Modality::Mif),
            "txt" | "text" => Ok(Modality::Txt),
            other => Err(AtlasError::Argument(format!("unknown modality {other:?}"))),
        }
    }
}

/// N embeddings of one modality with their patch identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub modality: Modality,
    pub rows: Array2<f32>,
    pub ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(modality: Modality, rows: Array2<f32>, ids: Vec<String>) -> Result<Self> {
        if rows.ncols() == 0 {
            return Err(AtlasError::Argument("embedding dim must be positive".into()));
        }
        if rows.nrows() != ids.len() {
            return Err(AtlasError::Argument(format!(
                "{} rows but {} ids",
                rows.nrows(),
                ids.len()
            )));
        }
        Ok(EmbeddingMatrix { modality, rows, ids })
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Scales every non-zero row to unit L2 norm.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        crate::linalg::normalize_rows_f32(&mut out.rows);
        out
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.rows.mapv(f64::from)
    }
}

pub const EMBEDDING_MAGIC: [u8; 4] = *b"HKEM";
pub const EMBEDDING_VERSION: u32 = 1;
/// magic(4) + version(4) + modality(1) + reserved(3) + dim(4) + count(8)
pub const EMBEDDING_HEADER_LEN: usize = 24;

/// Serializes to the `.hke` layout: 24-byte little-endian header, row-major
/// f32 payload, then one `u32 length + UTF-8 bytes` identifier per row.
pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let (n, dim) = matrix.rows.dim();
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + n * dim * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.push(matrix.modality.tag());
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in matrix.rows.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in &matrix.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix, FormatError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != EMBEDDING_MAGIC {
        return Err(FormatError::BadMagic {
            expected: EMBEDDING_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let modality = Modality::from_tag(cur.take(4)?[0])?;
    let dim = cur.u32()? as usize;
    let count = cur.u64()?;
    if dim == 0 {
        return Err(FormatError::ShapeMismatch("dim is zero".into()));
    }
    let count = usize::try_from(count)
        .map_err(|_| FormatError::ShapeMismatch(format!("count {count} too large")))?;
    let floats = count
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| FormatError::ShapeMismatch(format!("{count} x {dim} overflows")))?;
    let payload = cur.take(floats)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|_| FormatError::InvalidId)?);
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing bytes after {count} rows of dim {dim}",
            bytes.len() - cur.pos
        )));
    }
    let rows = Array2::from_shape_vec((count, dim), values)
        .map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
    Ok(EmbeddingMatrix { modality, rows, ids })
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(matrix)).map_err(|e| AtlasError::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| AtlasError::io(path, e))?;
    Ok(decode_embeddings(&bytes)?)
}

/// Aligns rows of several matrices on shared patch ids, in the order of `reference`.
pub fn align_by_id<'a>(
    reference: &'a EmbeddingMatrix,
    others: &[&'a EmbeddingMatrix],
) -> Result<Vec<Vec<usize>>> {
    let lookups: Vec<HashMap<&str, usize>> = others
        .iter()
        .map(|m| m.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect())
        .collect();
    let mut out = vec![Vec::with_capacity(reference.len()); others.len() + 1];
    for (i, id) in reference.ids.iter().enumerate() {
        out[0].push(i);
        for (k, lookup) in lookups.iter().enumerate() {
            let j = lookup.get(id.as_str()).ok_or_else(|| {
                AtlasError::Integrity(format!(
                    "patch {id:?} missing from {} embeddings",
                    others[k].modality.name()
                ))
            })?;
            out[k + 1].push(*j);
        }
    }
    Ok(out)
}

/// Label columns for an index, derived from slice metadata.
pub fn label_columns(dataset: &Dataset, patch_ids: &[String]) -> BTreeMap<String, Vec<Option<String>>> {
    let patches: HashMap<&str, &PatchRecord> =
        dataset.patches.iter().map(|p| (p.patch_id.as_str(), p)).collect();
    let slices = dataset.slice_index();
    let mut cols: BTreeMap<String, Vec<Option<String>>> = BTreeMap::new();
    for name in [
        "organ_type",
        "disease",
        "tissue_type",
        "t_stage",
        "n_stage",
        "m_stage",
        "tnm",
        "grade",
        "survival_status",
        "slice_id",
        "patient_id",
    ] {
        cols.insert(name.to_string(), Vec::with_capacity(patch_ids.len()));
    }
    for id in patch_ids {
        let patch = patches.get(id.as_str());
        let slice = patch.and_then(|p| slices.get(p.slice_id.as_str()));
        let meta = slice.and_then(|s| s.metadata.as_ref());
        let get = |name: &str| -> Option<String> {
            match name {
                "slice_id" => slice.map(|s| s.slice_id.clone()),
                "patient_id" => slice.map(|s| s.patient_id.clone()),
                _ => {
                    let m = meta?;
                    match name {
                        "organ_type" => Some(m.organ_type.clone()),
                        "disease" => Some(m.disease.clone()),
                        "tissue_type" => Some(m.tissue_type.clone()),
                        "t_stage" => m.t_stage.clone(),
                        "n_stage" => m.n_stage.clone(),
                        "m_stage" => m.m_stage.clone(),
                        "tnm" => {
                            let s: String = [&m.t_stage, &m.n_stage, &m.m_stage]
                                .iter()
                                .filter_map(|x| x.as_deref())
                                .collect();
                            (!s.is_empty()).then_some(s)
                        }
                        "grade" => m.grade.clone(),
                        "survival_status" => m.survival_status.map(|s| s.to_string()),
                        _ => None,
                    }
                }
            }
        };
        for (name, col) in cols.iter_mut() {
            col.push(get(name));
        }
    }
    cols
}
