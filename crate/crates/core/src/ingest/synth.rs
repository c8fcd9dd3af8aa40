//! Deterministic synthetic cohort standing in for pretrained encoders.
//!
//! Each patient draws a latent center `c ~ N(0, I)`; each patch draws
//! `z = 0.6 c + 0.8 u` with fresh `u ~ N(0, I)`. The three modality features
//! are fixed random linear maps of `z` plus independent Gaussian noise, the
//! biomarker means are a logistic readout of `z`, and clinical metadata is a
//! deterministic function of `c`, so structure planted in the latent space
//! is recoverable downstream.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClinicalMetadata, Dataset, EmbeddingMatrix, Modality, PatchRecord, SliceRecord, SurvivalStatus};
use crate::error::{AtlasError, Result};
use crate::rng::{substream, AtlasRng};
use crate::textgen::{self, BiomarkerSummary, ChannelSummary, SpatialPattern};

pub const PANEL: [&str; 12] = [
    "CD8", "PD-L1", "Ki67", "CD20", "Vimentin", "GATA3", "HLA-DR", "GranzymeB", "CD4", "CD68", "PanCK", "aSMA",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub patches_per_slice: usize,
    pub latent_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub he_dim: usize,
    pub mif_dim: usize,
    pub txt_dim: usize,
    pub n_channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 64,
            slices_per_patient: 1,
            patches_per_slice: 16,
            latent_dim: 32,
            noise_scale: 0.3,
            seed: 0,
            he_dim: 64,
            mif_dim: 48,
            txt_dim: 64,
            n_channels: 8,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(AtlasError::Argument("latent_dim must be at least 2".into()));
        }
        if self.n_channels == 0 || self.n_channels > PANEL.len() {
            return Err(AtlasError::Argument(format!("n_channels must be in 1..={}", PANEL.len())));
        }
        if self.he_dim == 0 || self.mif_dim == 0 || self.txt_dim == 0 {
            return Err(AtlasError::Argument("feature dimensions must be positive".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(AtlasError::Argument("noise_scale must be finite and non-negative".into()));
        }
        if self.slices_per_patient == 0 {
            return Err(AtlasError::Argument("slices_per_patient must be positive".into()));
        }
        Ok(())
    }
}

/// The fixed linear maps of a cohort.
#[derive(Debug, Clone)]
pub struct SynthMaps {
    pub he: Array2<f64>,
    pub mif: Array2<f64>,
    pub txt: Array2<f64>,
    pub abundance_w: Array2<f64>,
    pub abundance_b: Array1<f64>,
}

impl SynthMaps {
    fn draw(cfg: &SynthConfig) -> Self {
        let mut rng = substream(cfg.seed, "synth_maps");
        let l = cfg.latent_dim;
        let scale = 1.0 / (l as f64).sqrt();
        let gauss = |rows: usize, cols: usize, s: f64, rng: &mut AtlasRng| {
            Array2::from_shape_simple_fn((rows, cols), || s * rng.sample::<f64, _>(StandardNormal))
        };
        let he = gauss(cfg.he_dim, l, scale, &mut rng);
        let mif = gauss(cfg.mif_dim, l, scale, &mut rng);
        let txt = gauss(cfg.txt_dim, l, scale, &mut rng);
        let abundance_w = gauss(cfg.n_channels, l, scale, &mut rng);
        let abundance_b = Array1::from_shape_simple_fn(cfg.n_channels, || 0.5 * rng.sample::<f64, _>(StandardNormal));
        SynthMaps {
            he,
            mif,
            txt,
            abundance_w,
            abundance_b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub he: EmbeddingMatrix,
    pub mif: EmbeddingMatrix,
    pub txt: EmbeddingMatrix,
    /// Per-patch latent vectors, rows aligned with the embedding ids.
    pub latents: Array2<f64>,
    /// Per-patient latent centers in patient order.
    pub centers: Array2<f64>,
    pub maps: SynthMaps,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Clinical record implied by a latent center.
pub fn metadata_from_center(c: &[f64]) -> ClinicalMetadata {
    let last = c[c.len() - 1];
    let (organ, disease) = if last >= 0.0 {
        ("breast", "invasive ductal carcinoma")
    } else {
        ("lung", "adenocarcinoma")
    };
    let mut m = ClinicalMetadata::new(organ, disease, "tumor");
    let (c0, c1) = (c[0], c[1]);
    m.t_stage = Some(
        if c0 < -0.674 {
            "T1"
        } else if c0 < 0.0 {
            "T2"
        } else if c0 < 0.674 {
            "T3"
        } else {
            "T4"
        }
        .into(),
    );
    m.n_stage = Some(
        if c1 < 0.3 {
            "N0"
        } else if c1 < 1.0 {
            "N1"
        } else {
            "N2"
        }
        .into(),
    );
    m.m_stage = Some(if c0 + c1 > 2.0 { "M1" } else { "M0" }.into());
    m.grade = Some(
        if c0 < -0.5 {
            "G1"
        } else if c0 < 0.5 {
            "G2"
        } else {
            "G3"
        }
        .into(),
    );
    m.survival_status = Some(if c1 > 0.0 {
        SurvivalStatus::Deceased
    } else {
        SurvivalStatus::Alive
    });
    m.survival_months = Some((60.0 * (-0.5 * c0).exp()).round());
    m.treatment_response = Some(c.get(2).copied().unwrap_or(0.0) - 0.5 * c0 > 0.0);
    m
}

/// Synthetic stand-in for the text encoder. Clinical tokens found in the
/// text are mapped back to latent coordinates and pushed through the text
/// map without noise.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub config: SynthConfig,
    txt: Array2<f64>,
}

impl SyntheticProvider {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let txt = SynthMaps::draw(&config).txt;
        Ok(SyntheticProvider { config, txt })
    }

    pub fn dim(&self) -> usize {
        self.config.txt_dim
    }

    /// Latent estimate read from clinical tokens in `text`.
    pub fn latent_estimate(&self, text: &str) -> Vec<f64> {
        let mut z = vec![0.0; self.config.latent_dim];
        let words: Vec<String> = text
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_ascii_lowercase)
            .collect();
        let has = |w: &str| words.iter().any(|x| x == w);
        let mut c0 = None;
        let mut c1 = None;
        // TNM codes appear glued together, e.g. "t2n0m0".
        for w in &words {
            for (token, v) in [("t1", -1.27), ("t2", -0.32), ("t3", 0.32), ("t4", 1.27)] {
                if w.starts_with(token) {
                    c0 = Some(v);
                }
            }
            for (token, v) in [("n0", -0.5), ("n1", 0.62), ("n2", 1.5)] {
                if (w.starts_with('t') && w.contains(token)) || w == token {
                    c1 = Some(v);
                }
            }
        }
        if c0.is_none() {
            for (token, v) in [("g1", -1.1), ("g2", 0.0), ("g3", 1.1)] {
                if has(token) {
                    c0 = Some(v);
                }
            }
        }
        if c1.is_none() {
            if has("died") || has("deceased") {
                c1 = Some(0.8);
            } else if has("alive") {
                c1 = Some(-0.8);
            }
        }
        let last = if has("breast") {
            0.8
        } else if has("lung") {
            -0.8
        } else {
            0.0
        };
        z[0] = c0.unwrap_or(0.0);
        z[1] = c1.unwrap_or(0.0);
        let l = z.len();
        z[l - 1] = last;
        z.iter_mut().for_each(|v| *v *= 0.6);
        z
    }

    pub fn encode_text(&self, text: &str) -> Vec<f32> {
        let z = Array1::from(self.latent_estimate(text));
        self.txt.dot(&z).iter().map(|v| *v as f32).collect()
    }
}

fn pattern_from_mean(mu: f64) -> SpatialPattern {
    let coverage = mu / 255.0;
    textgen::assign_pattern(&textgen::SpatialMetrics {
        cv: 0.4,
        clustering: 0.55,
        glcm_homogeneity: Some(0.7),
        glcm_contrast: Some(0.5),
        coverage,
    })
}

pub fn synth_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let maps = SynthMaps::draw(cfg);
    let l = cfg.latent_dim;
    let mut latent_rng = substream(cfg.seed, "synth_latents");
    let mut noise_rng = substream(cfg.seed, "synth_noise");
    let channel_names: Vec<String> = PANEL[..cfg.n_channels].iter().map(|s| s.to_string()).collect();
    let template = textgen::Template::default();

    let n_slices = cfg.n_patients * cfg.slices_per_patient;
    let n = n_slices * cfg.patches_per_slice;
    let mut latents = Array2::<f64>::zeros((n, l));
    let mut centers = Array2::<f64>::zeros((cfg.n_patients, l));
    let mut slices = Vec::with_capacity(n_slices);
    let mut patches = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);

    let mut row = 0;
    for p in 0..cfg.n_patients {
        for v in centers.row_mut(p).iter_mut() {
            *v = latent_rng.sample(StandardNormal);
        }
        let center = centers.row(p).to_vec();
        let meta = metadata_from_center(&center);
        let patient_id = format!("P-{p:04}");
        for s in 0..cfg.slices_per_patient {
            let slice_id = format!("S-{p:04}-{s}");
            let first = row;
            let mut means = Array2::<f64>::zeros((cfg.patches_per_slice, cfg.n_channels));
            for k in 0..cfg.patches_per_slice {
                for j in 0..l {
                    let u: f64 = latent_rng.sample(StandardNormal);
                    latents[[row, j]] = 0.6 * center[j] + 0.8 * u;
                }
                let logits = maps.abundance_w.dot(&latents.row(row)) + &maps.abundance_b;
                means.row_mut(k).assign(&logits.mapv(|x| 255.0 * sigmoid(x)));
                row += 1;
            }
            let summaries: Vec<BiomarkerSummary> = if cfg.patches_per_slice >= 2 {
                textgen::summarize_region(&channel_names, means.view())?
            } else {
                vec![BiomarkerSummary {
                    channels: channel_names
                        .iter()
                        .zip(means.row(0))
                        .map(|(name, m)| ChannelSummary {
                            name: name.clone(),
                            mean: *m,
                            z: 0.0,
                            percentile: 1.0,
                        })
                        .collect(),
                }]
            };
            let metadata_text = template.clinical_text(Some(&meta));
            for (k, summary) in summaries.iter().enumerate() {
                let patterns: Vec<SpatialPattern> = means.row(k).iter().map(|m| pattern_from_mean(*m)).collect();
                let patch_id = format!("{slice_id}-p{k:03}");
                ids.push(patch_id.clone());
                patches.push(PatchRecord {
                    patch_id,
                    slice_id: slice_id.clone(),
                    coord: None,
                    means: means.row(k).to_vec(),
                    text: template.synthesize(summary, &patterns, Some(&meta))?,
                    metadata_text: metadata_text.clone(),
                });
            }
            debug_assert_eq!(row - first, cfg.patches_per_slice);
            slices.push(SliceRecord {
                slice_id,
                patient_id: patient_id.clone(),
                channels: channel_names.clone(),
                metadata: Some(meta.clone()),
                has_he: true,
                has_text: true,
                height: None,
                width: None,
            });
        }
    }

    let mut embed = |map: &Array2<f64>, modality: Modality| -> Result<EmbeddingMatrix> {
        let mut rows = latents.dot(&map.t());
        if cfg.noise_scale > 0.0 {
            rows.mapv_inplace(|v| v + cfg.noise_scale * noise_rng.sample::<f64, _>(StandardNormal));
        }
        EmbeddingMatrix::new(modality, rows.mapv(|v| v as f32), ids.clone())
    };
    let he = embed(&maps.he, Modality::He)?;
    let mif = embed(&maps.mif, Modality::Mif)?;
    let txt = embed(&maps.txt, Modality::Txt)?;
    Ok(SynthCohort {
        config: cfg.clone(),
        dataset: Dataset::new(slices, patches)?,
        he,
        mif,
        txt,
        latents,
        centers,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::encode_embeddings;
    use nalgebra::DMatrix;

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 6,
            patches_per_slice: 5,
            latent_dim: 8,
            he_dim: 16,
            mif_dim: 12,
            txt_dim: 16,
            n_channels: 4,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_cohort(&small()).unwrap();
        let b = synth_cohort(&small()).unwrap();
        assert_eq!(encode_embeddings(&a.he), encode_embeddings(&b.he));
        assert_eq!(encode_embeddings(&a.txt), encode_embeddings(&b.txt));
        assert_eq!(a.dataset, b.dataset);
        let c = synth_cohort(&SynthConfig { seed: 43, ..small() }).unwrap();
        assert_ne!(encode_embeddings(&a.he), encode_embeddings(&c.he));
    }

    #[test]
    fn latent_dim_one_rejected() {
        assert!(synth_cohort(&SynthConfig { latent_dim: 1, ..small() }).is_err());
    }

    fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
    }

    #[test]
    fn noiseless_pairs_are_mutual_best_matches() {
        let cfg = SynthConfig { noise_scale: 0.0, ..small() };
        let c = synth_cohort(&cfg).unwrap();
        // Carry H&E features into the mIF space through the latent space.
        let a_he = to_dmatrix(&c.maps.he);
        let pinv = a_he.pseudo_inverse(1e-12).unwrap();
        let a_mif = to_dmatrix(&c.maps.mif);
        let bridge = &a_mif * &pinv;
        let he = to_dmatrix(&c.he.to_f64());
        let mif = to_dmatrix(&c.mif.to_f64());
        let carried = &he * bridge.transpose();
        for i in 0..carried.nrows() {
            let q = carried.row(i);
            let cos = |j: usize| {
                let g = mif.row(j);
                q.dot(&g) / (q.norm() * g.norm())
            };
            let own = cos(i);
            assert!((own - 1.0).abs() < 1e-5, "{own}");
            for j in 0..mif.nrows() {
                assert!(cos(j) <= own + 1e-9);
            }
        }
    }

    #[test]
    fn metadata_follows_center() {
        let m = metadata_from_center(&[1.0, 1.2, 0.0, -0.3]);
        assert_eq!(m.t_stage.as_deref(), Some("T4"));
        assert_eq!(m.n_stage.as_deref(), Some("N2"));
        assert_eq!(m.m_stage.as_deref(), Some("M1"));
        assert_eq!(m.grade.as_deref(), Some("G3"));
        assert_eq!(m.survival_status, Some(SurvivalStatus::Deceased));
        assert_eq!(m.organ_type, "lung");
        m.validate().unwrap();
    }

    #[test]
    fn provider_reads_clinical_tokens() {
        let p = SyntheticProvider::new(small()).unwrap();
        let z = p.latent_estimate("This tumor sample from the breast shows x. The tumor is staged T4N2M0.");
        assert!((z[0] - 0.6 * 1.27).abs() < 1e-12);
        assert!((z[1] - 0.6 * 1.5).abs() < 1e-12);
        assert!((z[7] - 0.48).abs() < 1e-12);
        assert_eq!(p.encode_text("nothing here"), vec![0.0; 16]);
    }

    #[test]
    fn cohort_text_strips_to_metadata_text() {
        let c = synth_cohort(&small()).unwrap();
        for p in &c.dataset.patches {
            assert_eq!(textgen::strip_biomarkers(&p.text), p.metadata_text);
        }
    }
}
