//! On-disk layout shared by the CLI commands and the file-backed service.
//!
//! A data directory holds `manifest.hkm`, one `.hke` file per modality and,
//! for synthetic cohorts, `synth.toml` describing the text encoder. A
//! checkpoint directory holds `heads.hkck` and `loss.csv`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use atlas_core::align::{Checkpoint, TriHeads};
use atlas_core::ingest::{
    label_columns, load_manifest, read_embeddings, save_manifest, write_embeddings, ClinicalMetadata, Dataset,
    EmbeddingMatrix, Modality, SynthCohort, SynthConfig, SyntheticProvider,
};
use atlas_core::retrieval::EmbeddingIndex;
use atlas_core::textgen::Template;
use ndarray::{Array2, Axis};

use crate::error::{Result, ServiceError};

pub const MANIFEST: &str = "manifest.hkm";
pub const SYNTH_CONFIG: &str = "synth.toml";
pub const CHECKPOINT: &str = "heads.hkck";
pub const LOSS_TRACE: &str = "loss.csv";
pub const HOLDOUT: &str = "holdout.txt";

pub fn embedding_file(modality: Modality) -> &'static str {
    match modality {
        Modality::He => "he.hke",
        Modality::Mif => "mif.hke",
        Modality::Txt => "txt.hke",
    }
}

pub fn head_slot(modality: Modality) -> usize {
    match modality {
        Modality::He => 0,
        Modality::Mif => 1,
        Modality::Txt => 2,
    }
}

pub fn parse_modality(s: &str) -> Result<Modality> {
    match s.to_ascii_lowercase().as_str() {
        "he" | "h&e" => Ok(Modality::He),
        "mif" => Ok(Modality::Mif),
        "txt" | "text" => Ok(Modality::Txt),
        other => Err(ServiceError::BadRequest(format!("unknown modality {other:?}"))),
    }
}

/// Accepts either a checkpoint file or a directory containing one.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

pub fn load_heads(p: &Path) -> Result<TriHeads> {
    let ck = Checkpoint::load(checkpoint_path(p))?;
    Ok(TriHeads::from_checkpoint(&ck)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ServiceError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| ServiceError::io(path, e))
}

/// Writes a synthetic cohort in the data-directory layout.
pub fn write_cohort(cohort: &SynthCohort, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    save_manifest(&cohort.dataset, dir.join(MANIFEST))?;
    write_embeddings(&cohort.he, dir.join(embedding_file(Modality::He)))?;
    write_embeddings(&cohort.mif, dir.join(embedding_file(Modality::Mif)))?;
    write_embeddings(&cohort.txt, dir.join(embedding_file(Modality::Txt)))?;
    let cfg = toml::to_string(&cohort.config).map_err(|e| ServiceError::Config(e.to_string()))?;
    write_text(&dir.join(SYNTH_CONFIG), &cfg)
}

#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    pub dataset: Dataset,
    pub synth: Option<SynthConfig>,
}

impl DataDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let dataset = load_manifest(root.join(MANIFEST))?;
        let synth_path = root.join(SYNTH_CONFIG);
        let synth = if synth_path.exists() {
            let text = read_text(&synth_path)?;
            Some(toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", synth_path.display())))?)
        } else {
            None
        };
        Ok(DataDir { root, dataset, synth })
    }

    pub fn embeddings(&self, modality: Modality) -> Result<EmbeddingMatrix> {
        Ok(read_embeddings(self.root.join(embedding_file(modality)))?)
    }

    /// Channel names, which must agree across slices.
    pub fn channels(&self) -> Result<Vec<String>> {
        let mut names: Option<&Vec<String>> = None;
        for s in &self.dataset.slices {
            match names {
                None => names = Some(&s.channels),
                Some(n) if *n != s.channels => {
                    return Err(ServiceError::BadRequest(format!(
                        "slice {} has a different channel panel",
                        s.slice_id
                    )))
                }
                _ => {}
            }
        }
        Ok(names.cloned().unwrap_or_default())
    }

    pub fn slice_of(&self) -> HashMap<&str, &str> {
        self.dataset
            .patches
            .iter()
            .map(|p| (p.patch_id.as_str(), p.slice_id.as_str()))
            .collect()
    }

    pub fn patient_of_slice(&self) -> HashMap<&str, &str> {
        self.dataset
            .slices
            .iter()
            .map(|s| (s.slice_id.as_str(), s.patient_id.as_str()))
            .collect()
    }

    pub fn metadata_of_slice(&self) -> BTreeMap<String, Option<ClinicalMetadata>> {
        self.dataset
            .slices
            .iter()
            .map(|s| (s.slice_id.clone(), s.metadata.clone()))
            .collect()
    }

    /// Patch means as an abundance table in `ids` order (NaN where a patch
    /// is missing from the manifest).
    pub fn abundance(&self, ids: &[String]) -> Result<Array2<f64>> {
        let c = self.channels()?.len();
        let by_id: HashMap<&str, &Vec<f64>> = self
            .dataset
            .patches
            .iter()
            .map(|p| (p.patch_id.as_str(), &p.means))
            .collect();
        let mut table = Array2::from_elem((ids.len(), c), f64::NAN);
        for (i, id) in ids.iter().enumerate() {
            if let Some(m) = by_id.get(id.as_str()) {
                if m.len() != c {
                    return Err(ServiceError::BadRequest(format!("patch {id} has {} means for {c} channels", m.len())));
                }
                table.row_mut(i).assign(&ndarray::ArrayView1::from(m.as_slice()));
            }
        }
        Ok(table)
    }

    /// Patients listed in a holdout file, if the checkpoint has one.
    pub fn holdout(ckpt_dir: &Path) -> Result<Option<BTreeSet<String>>> {
        let path = ckpt_dir.join(HOLDOUT);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(
            read_text(&path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        ))
    }
}

/// Projects raw embeddings through one head into the shared space. Without
/// heads the raw rows are returned.
pub fn project(heads: Option<&TriHeads>, m: &EmbeddingMatrix) -> Result<Array2<f64>> {
    let x = m.to_f64();
    match heads {
        Some(h) => Ok(h.heads[head_slot(m.modality)].project_eval(x.view())?),
        None => Ok(x),
    }
}

pub fn rows_by_id(m: &EmbeddingMatrix, ids: &[String]) -> Result<Vec<usize>> {
    let pos: HashMap<&str, usize> = m.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    ids.iter()
        .map(|id| {
            pos.get(id.as_str())
                .copied()
                .ok_or_else(|| ServiceError::NotFound(format!("patch {id} has no {} embedding", m.modality.name())))
        })
        .collect()
}

/// Gallery over one modality with metadata labels, patch-mean abundance and
/// slice regions attached.
pub fn build_gallery(data: &DataDir, heads: Option<&TriHeads>, modality: Modality, keep: Option<&BTreeSet<String>>) -> Result<EmbeddingIndex> {
    let raw = data.embeddings(modality)?;
    let slice_of = data.slice_of();
    let patient_of = data.patient_of_slice();
    let rows: Vec<usize> = (0..raw.len())
        .filter(|&i| match keep {
            None => true,
            Some(set) => slice_of
                .get(raw.ids[i].as_str())
                .and_then(|s| patient_of.get(s))
                .is_some_and(|p| set.contains(*p)),
        })
        .collect();
    let ids: Vec<String> = rows.iter().map(|&i| raw.ids[i].clone()).collect();
    let projected = project(heads, &raw)?.select(Axis(0), &rows);
    let matrix = EmbeddingMatrix::new(modality, projected.mapv(|v| v as f32), ids.clone())?;
    let regions = ids
        .iter()
        .map(|id| slice_of.get(id.as_str()).map(|s| s.to_string()).unwrap_or_default())
        .collect();
    Ok(EmbeddingIndex::build(&matrix)?
        .with_labels(label_columns(&data.dataset, &ids))?
        .with_abundance(data.channels()?, data.abundance(&ids)?)?
        .with_regions(regions)?)
}

/// Clinical-text encoder used to build counterfactual text embeddings.
#[derive(Debug, Clone)]
pub enum TextEncoder {
    /// Synthetic provider followed by the trained text head.
    Synthetic {
        provider: SyntheticProvider,
        heads: Option<Box<TriHeads>>,
    },
    /// Planted cohort: the embedding is the one-hot N-stage axis.
    Planted { morph_dim: usize },
}

impl TextEncoder {
    pub fn encode(&self, meta: Option<&ClinicalMetadata>) -> Result<Vec<f64>> {
        match self {
            TextEncoder::Synthetic { provider, heads } => {
                let text = Template::default().clinical_text(meta);
                let raw: Vec<f64> = provider.encode_text(&text).into_iter().map(f64::from).collect();
                match heads {
                    Some(h) => {
                        let x = Array2::from_shape_vec((1, raw.len()), raw).expect("one row");
                        Ok(h.heads[head_slot(Modality::Txt)].project_eval(x.view())?.row(0).to_vec())
                    }
                    None => Ok(raw),
                }
            }
            TextEncoder::Planted { morph_dim } => {
                use atlas_core::counterfactual::planted::STAGES;
                let stage = meta.and_then(|m| m.n_stage.as_deref()).ok_or_else(|| {
                    ServiceError::BadRequest("the planted text encoder needs an n_stage".into())
                })?;
                let s = STAGES.iter().position(|x| *x == stage).ok_or_else(|| {
                    ServiceError::BadRequest(format!("the planted text encoder knows {STAGES:?}, not {stage:?}"))
                })?;
                let mut t = vec![0.0; morph_dim + STAGES.len()];
                t[morph_dim + s] = 1.0;
                Ok(t)
            }
        }
    }

    pub fn clinical_text(meta: Option<&ClinicalMetadata>) -> String {
        Template::default().clinical_text(meta)
    }
}
