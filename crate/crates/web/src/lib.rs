//! Browser bindings for the demo page in `www/`.
//!
//! Every export takes plain numbers or byte buffers and returns a JSON
//! string, so the page needs no generated TypeScript types. `tile`,
//! `pattern` and `Planted::compose` are the same calls without the wasm
//! boundary.

use atlas_core::counterfactual::planted::{planted_cohort, PlantedCohort, PlantedConfig, STAGES};
use atlas_core::counterfactual::{composition_shift, run_pair, shift_matrix, CompositionTest};
use atlas_core::preprocess::{coverage, generate_patches, GridStatus, PatchConfig};
use atlas_core::textgen::{assign_pattern, spatial_metrics, SpatialMetrics, SpatialPattern};
use atlas_core::AtlasError;
use ndarray::ArrayView2;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, AtlasError>;

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":{:?}}}", e.to_string()))
}

fn reply<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => to_json(&v),
        Err(e) => to_json(&serde_json::json!({ "error": e.to_string() })),
    }
}

fn plane<'a, T>(data: &'a [T], width: usize, height: usize) -> Result<ArrayView2<'a, T>> {
    ArrayView2::from_shape((height, width), data)
        .map_err(|_| AtlasError::Argument(format!("buffer of {} values is not {width}x{height}", data.len())))
}

#[derive(Debug, Serialize)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub coverage: f64,
}

#[derive(Debug, Serialize)]
pub struct Tiling {
    pub status: &'static str,
    pub stride: usize,
    pub max_jitter: usize,
    pub tiles: Vec<Tile>,
}

/// Tiles a row-major mask (non-zero is tissue). `jitter < 0` uses the
/// default of 15% of the patch size.
pub fn tile(mask: &[u8], width: usize, height: usize, patch: usize, jitter: i32, min_coverage: f64, seed: u64) -> Result<Tiling> {
    let bools: Vec<bool> = mask.iter().map(|v| *v > 0).collect();
    let view = plane(&bools, width, height)?;
    let cfg = PatchConfig {
        patch,
        jitter: usize::try_from(jitter).ok(),
        min_coverage,
    };
    let grid = generate_patches(view, &cfg, seed);
    Ok(Tiling {
        status: match grid.status {
            GridStatus::Ok => "ok",
            GridStatus::TooSmall => "too_small",
        },
        stride: cfg.stride(),
        max_jitter: cfg.max_jitter(),
        tiles: grid
            .coords
            .iter()
            .map(|c| Tile {
                x: c.x_left,
                y: c.y_bottom,
                size: c.size(),
                coverage: coverage(view, c),
            })
            .collect(),
    })
}

#[wasm_bindgen]
pub fn tile_mask(mask: &[u8], width: usize, height: usize, patch: usize, jitter: i32, min_coverage: f64, seed: u32) -> String {
    reply(tile(mask, width, height, patch, jitter, min_coverage, u64::from(seed)))
}

#[derive(Debug, Serialize)]
pub struct PatternView {
    pub metrics: SpatialMetrics,
    pub pattern: SpatialPattern,
    pub phrase: String,
}

fn word<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn phrase(p: &SpatialPattern) -> String {
    format!("{} {} distribution", word(&p.density), word(&p.category))
}

/// Spatial metrics and pattern label of one 8-bit channel window.
pub fn pattern(data: &[u8], width: usize, height: usize) -> Result<PatternView> {
    let m = spatial_metrics(plane(data, width, height)?);
    let p = assign_pattern(&m);
    Ok(PatternView {
        metrics: m,
        phrase: phrase(&p),
        pattern: p,
    })
}

#[wasm_bindgen]
pub fn pattern_of_window(data: &[u8], width: usize, height: usize) -> String {
    reply(pattern(data, width, height))
}

/// Pattern rule applied to hand-set metrics; a negative homogeneity means
/// the window had no foreground.
#[wasm_bindgen]
pub fn pattern_rule(coverage: f64, cv: f64, clustering: f64, homogeneity: f64) -> String {
    let m = SpatialMetrics {
        cv,
        clustering,
        glcm_homogeneity: (homogeneity >= 0.0).then_some(homogeneity),
        glcm_contrast: None,
        coverage,
    };
    let p = assign_pattern(&m);
    to_json(&PatternView {
        metrics: m,
        phrase: phrase(&p),
        pattern: p,
    })
}

#[derive(Debug, Serialize)]
pub struct StageBar {
    pub stage: String,
    pub original: f64,
    pub counterfactual: f64,
    pub adjusted_p: f64,
    pub significant: bool,
}

#[derive(Debug, Serialize)]
pub struct ClusterShiftBar {
    pub cluster: usize,
    pub queries: usize,
    pub mean_d: f64,
}

#[derive(Debug, Serialize)]
pub struct Composition {
    pub alpha: f64,
    pub k: usize,
    pub from: String,
    pub to: String,
    pub identical: usize,
    pub queries: usize,
    pub stages: Vec<StageBar>,
    /// Mean shift of the planted channel per morphology cluster.
    pub channel: String,
    pub target_cluster: usize,
    pub shift: Vec<ClusterShiftBar>,
}

/// The planted cohort: four morphology clusters, gallery items at each N
/// stage, and a biomarker raised in one cluster's N2 items.
#[wasm_bindgen]
pub struct Planted {
    cohort: PlantedCohort,
}

fn stage_index(stage: &str) -> Result<usize> {
    STAGES
        .iter()
        .position(|s| *s == stage)
        .ok_or_else(|| AtlasError::Argument(format!("stage must be one of {STAGES:?}, not {stage:?}")))
}

impl Planted {
    pub fn with_config(cfg: &PlantedConfig) -> Result<Self> {
        Ok(Planted {
            cohort: planted_cohort(cfg)?,
        })
    }

    /// Retrieval under `from` text versus `to` text for every query.
    pub fn compose(&self, alpha: f64, k: usize, from: &str, to: &str) -> Result<Composition> {
        let c = &self.cohort;
        let control = c.stage_text(stage_index(from)?);
        let edited = c.stage_text(stage_index(to)?);
        let run = run_pair(&c.index, &c.query_ids, c.query_he.view(), &control, &edited, alpha, k)?;
        let stages: Vec<String> = STAGES.iter().map(|s| s.to_string()).collect();
        let comp = composition_shift(&run, &c.index, "n_stage", &stages, CompositionTest::RankSum, 0.05)?;
        let shift = shift_matrix(&run, &c.index)?;
        let target = c.channels[c.config.target_channel].clone();
        let col = shift.channels.iter().position(|ch| *ch == target);
        let mut bars = Vec::with_capacity(c.config.clusters);
        for k in 0..c.config.clusters {
            let rows: Vec<usize> = (0..c.query_cluster.len()).filter(|&i| c.query_cluster[i] == k).collect();
            let mean_d = match col {
                Some(j) if !rows.is_empty() => rows.iter().map(|&i| shift.d[[i, j]]).sum::<f64>() / rows.len() as f64,
                _ => f64::NAN,
            };
            bars.push(ClusterShiftBar {
                cluster: k,
                queries: rows.len(),
                mean_d,
            });
        }
        Ok(Composition {
            alpha,
            k,
            from: from.into(),
            to: to.into(),
            identical: run
                .original
                .iter()
                .zip(&run.counterfactual)
                .filter(|(a, b)| a.indices == b.indices)
                .count(),
            queries: run.query_ids.len(),
            stages: comp
                .categories
                .into_iter()
                .map(|s| StageBar {
                    stage: s.category,
                    original: s.mean_original,
                    counterfactual: s.mean_counterfactual,
                    adjusted_p: s.adjusted_p,
                    significant: s.significant,
                })
                .collect(),
            channel: target,
            target_cluster: c.config.target_cluster,
            shift: bars,
        })
    }

    /// Mean `to`-stage fraction under the edited text at each α in `0..=steps`.
    pub fn sweep(&self, k: usize, from: &str, to: &str, steps: usize) -> Result<Vec<(f64, f64, f64)>> {
        let steps = steps.max(1);
        (0..=steps)
            .map(|i| {
                let alpha = i as f64 / steps as f64;
                let comp = self.compose(alpha, k, from, to)?;
                let bar = comp.stages.iter().find(|s| s.stage == to).expect("target stage is listed");
                Ok((alpha, bar.original, bar.counterfactual))
            })
            .collect()
    }
}

#[wasm_bindgen]
impl Planted {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Planted, JsError> {
        let cfg = PlantedConfig {
            seed: u64::from(seed),
            ..PlantedConfig::default()
        };
        Self::with_config(&cfg).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn gallery_size(&self) -> usize {
        self.cohort.index.len()
    }

    pub fn query_count(&self) -> usize {
        self.cohort.query_ids.len()
    }

    pub fn composition(&self, alpha: f64, k: usize, from: &str, to: &str) -> String {
        reply(self.compose(alpha, k, from, to))
    }

    pub fn alpha_sweep(&self, k: usize, from: &str, to: &str, steps: usize) -> String {
        reply(self.sweep(k, from, to, steps).map(|rows| {
            rows.into_iter()
                .map(|(alpha, original, counterfactual)| serde_json::json!({ "alpha": alpha, "original": original, "counterfactual": counterfactual }))
                .collect::<Vec<_>>()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_bands() {
        let v: serde_json::Value = serde_json::from_str(&pattern_rule(0.05, 0.1, 0.9, 0.9)).unwrap();
        assert_eq!(v["pattern"]["category"], "sparse");
        assert_eq!(v["pattern"]["density"], "minimal");
        assert_eq!(v["phrase"], "minimal sparse distribution");
        let v: serde_json::Value = serde_json::from_str(&pattern_rule(0.9, 0.2, 0.5, 0.8)).unwrap();
        assert_eq!(v["pattern"]["category"], "uniform");
        let v: serde_json::Value = serde_json::from_str(&pattern_rule(0.9, 0.2, 0.5, -1.0)).unwrap();
        assert_eq!(v["pattern"]["category"], "heterogeneous");
    }

    #[test]
    fn bad_buffer_reports_an_error() {
        let v: serde_json::Value = serde_json::from_str(&tile_mask(&[1, 1, 1], 2, 2, 1, 0, 0.5, 0)).unwrap();
        assert!(v["error"].as_str().unwrap().contains("2x2"));
    }
}
