//! Planted counterfactual cohort.
//!
//! Gallery patches live in a shared space split into a morphology block and
//! a three-axis N-stage block. Every morphology point appears once per stage
//! with identical abundances, except that stage N2 copies in the target
//! cluster carry an extra `effect` on the target channel. Editing the query
//! text from N0 to N2 therefore mirrors the retrieved set stage for stage:
//! only the planted channel in the target cluster moves.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::ingest::{EmbeddingMatrix, Modality, PANEL};
use crate::linalg::normalize_vec;
use crate::retrieval::EmbeddingIndex;
use crate::rng::substream;

pub const STAGES: [&str; 3] = ["N0", "N1", "N2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub clusters: usize,
    pub points_per_cluster: usize,
    pub queries_per_cluster: usize,
    pub morph_dim: usize,
    pub n_channels: usize,
    pub target_cluster: usize,
    pub target_channel: usize,
    pub effect: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            clusters: 4,
            points_per_cluster: 40,
            queries_per_cluster: 15,
            morph_dim: 12,
            n_channels: 8,
            target_cluster: 2,
            target_channel: 0,
            effect: 15.0,
            jitter: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCohort {
    pub index: EmbeddingIndex,
    pub query_ids: Vec<String>,
    pub query_he: Array2<f64>,
    /// Planted morphology cluster of each query.
    pub query_cluster: Vec<usize>,
    /// Each query's own patch-mean abundance.
    pub baseline: Array2<f64>,
    pub control_txt: Vec<f64>,
    pub cf_txt: Vec<f64>,
    pub channels: Vec<String>,
    pub config: PlantedConfig,
}

impl PlantedCohort {
    pub fn dim(&self) -> usize {
        self.config.morph_dim + STAGES.len()
    }

    /// Text embedding for one N stage.
    pub fn stage_text(&self, stage: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.dim()];
        t[self.config.morph_dim + stage] = 1.0;
        t
    }
}

fn channel_name(c: usize) -> String {
    PANEL.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("ch{c}"))
}

pub fn planted_cohort(cfg: &PlantedConfig) -> Result<PlantedCohort> {
    if cfg.clusters == 0 || cfg.clusters > cfg.morph_dim {
        return Err(AtlasError::Config("planted clusters must be between 1 and morph_dim".into()));
    }
    if cfg.target_cluster >= cfg.clusters || cfg.target_channel >= cfg.n_channels {
        return Err(AtlasError::Config("planted target is out of range".into()));
    }
    let mut rng = substream(cfg.seed, "planted");
    let d = cfg.morph_dim + STAGES.len();
    let morph = |k: usize, rng: &mut crate::rng::AtlasRng| {
        let mut m: Vec<f64> = (0..cfg.morph_dim)
            .map(|j| f64::from(u8::from(j == k)) + cfg.jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize_vec(&mut m);
        m
    };
    let base = |k: usize, c: usize| 20.0 + 10.0 * ((k + c) % 4) as f64;

    let n = cfg.clusters * cfg.points_per_cluster * STAGES.len();
    let mut rows = Array2::<f32>::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    let mut stage_labels = Vec::with_capacity(n);
    let mut tnm = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    let mut table = Array2::<f64>::zeros((n, cfg.n_channels));
    let mut r = 0;
    for k in 0..cfg.clusters {
        for p in 0..cfg.points_per_cluster {
            let m = morph(k, &mut rng);
            let abundance: Vec<f64> = (0..cfg.n_channels)
                .map(|c| (base(k, c) + 3.0 * rng.sample::<f64, _>(StandardNormal)).max(0.0))
                .collect();
            // N1 first: it ties with N2 under N0 text and with N0 under N2
            // text, and the lower index wins ties either way.
            for s in [1, 0, 2] {
                let stage = STAGES[s];
                for j in 0..cfg.morph_dim {
                    rows[[r, j]] = (0.8 * m[j]) as f32;
                }
                rows[[r, cfg.morph_dim + s]] = 0.6;
                for c in 0..cfg.n_channels {
                    table[[r, c]] = abundance[c];
                }
                if s == 2 && k == cfg.target_cluster {
                    table[[r, cfg.target_channel]] += cfg.effect;
                }
                ids.push(format!("g{k}-{p:03}-{stage}"));
                stage_labels.push(Some(stage.to_string()));
                tnm.push(Some(format!("T2{stage}M0")));
                regions.push(format!("c{k}"));
                r += 1;
            }
        }
    }
    let matrix = EmbeddingMatrix::new(Modality::Mif, rows, ids)?;
    let mut labels = BTreeMap::new();
    labels.insert("n_stage".to_string(), stage_labels);
    labels.insert("tnm".to_string(), tnm);
    let channels: Vec<String> = (0..cfg.n_channels).map(channel_name).collect();
    let index = EmbeddingIndex::build(&matrix)?
        .with_labels(labels)?
        .with_abundance(channels.clone(), table)?
        .with_regions(regions)?;

    let nq = cfg.clusters * cfg.queries_per_cluster;
    let mut query_he = Array2::zeros((nq, d));
    let mut baseline = Array2::zeros((nq, cfg.n_channels));
    let mut query_ids = Vec::with_capacity(nq);
    let mut query_cluster = Vec::with_capacity(nq);
    for k in 0..cfg.clusters {
        for q in 0..cfg.queries_per_cluster {
            let i = query_ids.len();
            let m = morph(k, &mut rng);
            for j in 0..cfg.morph_dim {
                query_he[[i, j]] = m[j];
            }
            for c in 0..cfg.n_channels {
                baseline[[i, c]] = (base(k, c) + 3.0 * rng.sample::<f64, _>(StandardNormal)).max(0.0);
            }
            query_ids.push(format!("q{k}-{q:03}"));
            query_cluster.push(k);
        }
    }
    let mut cohort = PlantedCohort {
        index,
        query_ids,
        query_he,
        query_cluster,
        baseline,
        control_txt: Vec::new(),
        cf_txt: Vec::new(),
        channels,
        config: cfg.clone(),
    };
    cohort.control_txt = cohort.stage_text(0);
    cohort.cf_txt = cohort.stage_text(2);
    Ok(cohort)
}
