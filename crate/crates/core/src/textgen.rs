//! Patch-level text: biomarker quantification, spatial metrics, rule-based
//! pattern labels, template synthesis and metadata edits.
//!
//! Numbers computed here only order and classify channels; none of them is
//! written into the generated text.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::ingest::{is_stage_token, ClinicalMetadata, SurvivalStatus};

pub const EPS: f64 = 1e-8;
pub const GLCM_LEVELS: usize = 8;

const TEMPLATE_SOURCE: &str = include_str!("../templates/patch_description.txt");

/// Phrases that open the biomarker part of a description.
pub const TRANSITION_PHRASES: [&str; 2] = ["regarding the molecular profile", "in terms of protein expression"];

/// Mean over non-zero pixels; 0 when the plane has none.
pub fn patch_channel_mean(plane: ArrayView2<u8>) -> f64 {
    let (sum, n) = plane
        .iter()
        .filter(|v| **v > 0)
        .fold((0u64, 0u64), |(s, n), v| (s + u64::from(*v), n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Leave-one-out z-score and percentile of `means[k]` against the other
/// patches of its region. The spread is the population standard deviation
/// of the `N - 1` remaining values.
pub fn loo_stats(means: &[f64], k: usize) -> Result<(f64, f64)> {
    if means.len() < 2 {
        return Err(AtlasError::Degenerate(
            "leave-one-out statistics need at least two patches in the region".into(),
        ));
    }
    if k >= means.len() {
        return Err(AtlasError::Argument(format!("index {k} out of {} patches", means.len())));
    }
    let mu = means[k];
    let others = means.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v);
    let n = (means.len() - 1) as f64;
    let mean = others.clone().sum::<f64>() / n;
    let var = others.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let z = (mu - mean) / (var.sqrt() + EPS);
    let pi = others.filter(|v| *v <= mu).count() as f64 / n;
    Ok((z, pi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub name: String,
    pub mean: f64,
    pub z: f64,
    pub percentile: f64,
}

/// Per-channel summary of one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerSummary {
    pub channels: Vec<ChannelSummary>,
}

/// Summaries for every patch of a region, given its patches x channels mean
/// table.
pub fn summarize_region(names: &[String], means: ArrayView2<f64>) -> Result<Vec<BiomarkerSummary>> {
    if means.ncols() != names.len() {
        return Err(AtlasError::Argument(format!(
            "{} channel names for {} mean columns",
            names.len(),
            means.ncols()
        )));
    }
    let columns: Vec<Vec<f64>> = means.columns().into_iter().map(|c| c.to_vec()).collect();
    (0..means.nrows())
        .map(|k| {
            let channels = names
                .iter()
                .zip(&columns)
                .map(|(name, col)| {
                    let (z, percentile) = loo_stats(col, k)?;
                    Ok(ChannelSummary {
                        name: name.clone(),
                        mean: col[k],
                        z,
                        percentile,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BiomarkerSummary { channels })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialMetrics {
    pub cv: f64,
    pub clustering: f64,
    /// `None` when the patch has no foreground.
    pub glcm_homogeneity: Option<f64>,
    pub glcm_contrast: Option<f64>,
    pub coverage: f64,
}

/// Symmetric, normalized co-occurrence matrix at offset (0, +1) after
/// quantizing 8-bit values to `levels` gray levels.
pub fn glcm(plane: ArrayView2<u8>, levels: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((levels, levels));
    let shift = 256 / levels;
    let mut total = 0.0;
    let (h, w) = plane.dim();
    for y in 0..h {
        for x in 1..w {
            let i = usize::from(plane[[y, x - 1]]) / shift;
            let j = usize::from(plane[[y, x]]) / shift;
            m[[i, j]] += 1.0;
            m[[j, i]] += 1.0;
            total += 2.0;
        }
    }
    if total > 0.0 {
        m /= total;
    }
    m
}

fn glcm_features(p: &Array2<f64>) -> (f64, f64) {
    let mut homogeneity = 0.0;
    let mut contrast = 0.0;
    for ((i, j), v) in p.indexed_iter() {
        let d = (i as f64 - j as f64).powi(2);
        homogeneity += v / (1.0 + d);
        contrast += v * d;
    }
    (homogeneity, contrast)
}

/// Central-difference gradient magnitude at every pixel, one-sided at the
/// borders, on intensities rescaled to [0, 1].
fn gradient_magnitude(plane: ArrayView2<u8>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let v = |y: usize, x: usize| f64::from(plane[[y, x]]) / 255.0;
    let diff = |lo: usize, hi: usize, at: &dyn Fn(usize) -> f64| -> f64 {
        if hi == lo {
            0.0
        } else {
            (at(hi) - at(lo)) / (hi - lo) as f64
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let gx = diff(x.saturating_sub(1), (x + 1).min(w - 1), &|xx| v(y, xx));
        let gy = diff(y.saturating_sub(1), (y + 1).min(h - 1), &|yy| v(yy, x));
        (gx * gx + gy * gy).sqrt()
    })
}

pub fn spatial_metrics(plane: ArrayView2<u8>) -> SpatialMetrics {
    let fg: Vec<f64> = plane.iter().filter(|v| **v > 0).map(|v| f64::from(*v)).collect();
    if fg.is_empty() {
        return SpatialMetrics {
            cv: 0.0,
            clustering: 1.0,
            glcm_homogeneity: None,
            glcm_contrast: None,
            coverage: 0.0,
        };
    }
    let n = fg.len() as f64;
    let mean = fg.iter().sum::<f64>() / n;
    let std = (fg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let grad = gradient_magnitude(plane);
    let mean_grad = grad
        .iter()
        .zip(plane.iter())
        .filter(|(_, v)| **v > 0)
        .map(|(g, _)| *g)
        .sum::<f64>()
        / n;
    let (homogeneity, contrast) = glcm_features(&glcm(plane, GLCM_LEVELS));
    SpatialMetrics {
        cv: std / (mean + EPS),
        clustering: 1.0 / (1.0 + mean_grad),
        glcm_homogeneity: Some(homogeneity),
        glcm_contrast: Some(contrast),
        coverage: n / plane.len() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternCategory {
    Sparse,
    Uniform,
    Clustered,
    Heterogeneous,
    Scattered,
}

/// Coverage band used as the density qualifier of a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Extensive,
    Partial,
    Limited,
    Minimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialPattern {
    pub category: PatternCategory,
    pub density: Density,
}

pub fn assign_pattern(m: &SpatialMetrics) -> SpatialPattern {
    use PatternCategory::*;
    let cov = m.coverage;
    let homogeneous = m.glcm_homogeneity.is_some_and(|h| h > 0.6);
    let (category, density) = if cov < 0.1 {
        (Sparse, Density::Minimal)
    } else if cov > 0.7 {
        let c = if m.cv < 0.5 && homogeneous {
            Uniform
        } else if m.clustering > 0.7 {
            Clustered
        } else {
            Heterogeneous
        };
        (c, Density::Extensive)
    } else if cov > 0.3 {
        let c = if m.clustering > 0.6 {
            Clustered
        } else if m.cv < 0.6 {
            Uniform
        } else {
            Heterogeneous
        };
        (c, Density::Partial)
    } else {
        let c = if m.clustering > 0.5 { Clustered } else { Scattered };
        (c, Density::Limited)
    };
    SpatialPattern { category, density }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Moderate,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelThresholds {
    pub high: f64,
    pub low: f64,
}

impl Default for LevelThresholds {
    fn default() -> Self {
        LevelThresholds { high: 1.0, low: -1.0 }
    }
}

impl LevelThresholds {
    pub fn level(&self, z: f64) -> Level {
        if z >= self.high {
            Level::High
        } else if z <= self.low {
            Level::Low
        } else {
            Level::Moderate
        }
    }
}

/// Parsed template resource.
#[derive(Debug, Clone)]
pub struct Template {
    entries: HashMap<String, String>,
    pub thresholds: LevelThresholds,
}

impl Default for Template {
    fn default() -> Self {
        Template::parse(TEMPLATE_SOURCE).expect("bundled template is valid")
    }
}

const REQUIRED_KEYS: [&str; 26] = [
    "tissue",
    "staging",
    "grade",
    "survival_alive",
    "survival_alive_months",
    "survival_deceased",
    "survival_deceased_months",
    "response_yes",
    "response_no",
    "annotation",
    "transition",
    "channel",
    "channel_separator",
    "closing",
    "level_high",
    "level_moderate",
    "level_low",
    "pattern_sparse",
    "pattern_uniform",
    "pattern_clustered",
    "pattern_heterogeneous",
    "pattern_scattered",
    "density_extensive",
    "density_partial",
    "density_limited",
    "density_minimal",
];

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| AtlasError::Parse {
                line: i + 1,
                message: "expected `key = text`".into(),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        for key in REQUIRED_KEYS {
            if !entries.contains_key(key) {
                return Err(AtlasError::Config(format!("template is missing `{key}`")));
            }
        }
        Ok(Template {
            entries,
            thresholds: LevelThresholds::default(),
        })
    }

    fn get(&self, key: &str) -> &str {
        &self.entries[key]
    }

    fn fill(&self, key: &str, values: &[(&str, &str)]) -> String {
        let mut out = self.get(key).to_string();
        for (name, value) in values {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }

    fn pattern_word(&self, c: PatternCategory) -> &str {
        self.get(match c {
            PatternCategory::Sparse => "pattern_sparse",
            PatternCategory::Uniform => "pattern_uniform",
            PatternCategory::Clustered => "pattern_clustered",
            PatternCategory::Heterogeneous => "pattern_heterogeneous",
            PatternCategory::Scattered => "pattern_scattered",
        })
    }

    fn density_word(&self, d: Density) -> &str {
        self.get(match d {
            Density::Extensive => "density_extensive",
            Density::Partial => "density_partial",
            Density::Limited => "density_limited",
            Density::Minimal => "density_minimal",
        })
    }

    fn level_word(&self, l: Level) -> &str {
        self.get(match l {
            Level::High => "level_high",
            Level::Moderate => "level_moderate",
            Level::Low => "level_low",
        })
    }

    /// Clinical sentences, one per present field, in a fixed order.
    pub fn clinical_sentences(&self, meta: &ClinicalMetadata) -> Vec<String> {
        let mut out = vec![self.fill(
            "tissue",
            &[
                ("tissue_type", &meta.tissue_type),
                ("organ_type", &meta.organ_type),
                ("disease", &meta.disease),
            ],
        )];
        let tnm: String = [&meta.t_stage, &meta.n_stage, &meta.m_stage]
            .iter()
            .filter_map(|s| s.as_deref())
            .collect();
        if !tnm.is_empty() {
            out.push(self.fill("staging", &[("tnm", &tnm)]));
        }
        if let Some(g) = &meta.grade {
            out.push(self.fill("grade", &[("grade", g)]));
        }
        if let Some(status) = meta.survival_status {
            let base = match status {
                SurvivalStatus::Alive => "survival_alive",
                SurvivalStatus::Deceased => "survival_deceased",
            };
            out.push(match meta.survival_months {
                Some(m) => self.fill(&format!("{base}_months"), &[("months", &format_months(m))]),
                None => self.get(base).to_string(),
            });
        }
        if let Some(r) = meta.treatment_response {
            out.push(self.get(if r { "response_yes" } else { "response_no" }).to_string());
        }
        if let Some(a) = &meta.annotation {
            out.push(self.fill("annotation", &[("annotation", a)]));
        }
        out
    }

    /// Metadata-only description; empty when there is no metadata.
    pub fn clinical_text(&self, meta: Option<&ClinicalMetadata>) -> String {
        meta.map(|m| self.clinical_sentences(m).join(" ")).unwrap_or_default()
    }

    pub fn synthesize(
        &self,
        summary: &BiomarkerSummary,
        patterns: &[SpatialPattern],
        meta: Option<&ClinicalMetadata>,
    ) -> Result<String> {
        if summary.channels.len() != patterns.len() {
            return Err(AtlasError::Argument(format!(
                "{} channel summaries but {} patterns",
                summary.channels.len(),
                patterns.len()
            )));
        }
        let mut order: Vec<usize> = (0..patterns.len()).collect();
        // Stable sort keeps the channel order for equal z.
        order.sort_by(|&a, &b| summary.channels[b].z.total_cmp(&summary.channels[a].z));
        let clauses: Vec<String> = order
            .iter()
            .map(|&i| {
                let ch = &summary.channels[i];
                let p = patterns[i];
                self.fill(
                    "channel",
                    &[
                        ("biomarker", &ch.name),
                        ("level", self.level_word(self.thresholds.level(ch.z))),
                        ("pattern", self.pattern_word(p.category)),
                        ("density", self.density_word(p.density)),
                    ],
                )
            })
            .collect();
        let mut molecular = self.get("transition").to_string();
        if !clauses.is_empty() {
            molecular.push(' ');
            molecular.push_str(&clauses.join(&format!("{} ", self.get("channel_separator"))));
        }
        molecular.push_str(self.get("closing"));
        let clinical = self.clinical_text(meta);
        Ok(if clinical.is_empty() {
            molecular
        } else {
            format!("{clinical} {molecular}")
        })
    }
}

fn format_months(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("{}", m as i64)
    } else {
        format!("{m:.1}")
    }
}

/// Full description with the bundled template.
pub fn synthesize_text(
    summary: &BiomarkerSummary,
    patterns: &[SpatialPattern],
    meta: Option<&ClinicalMetadata>,
) -> Result<String> {
    Template::default().synthesize(summary, patterns, meta)
}

/// Truncates before the earliest registered transition phrase
/// (ASCII case-insensitive) and trims trailing whitespace.
pub fn strip_with(text: &str, phrases: &[&str]) -> String {
    let lower = text.to_ascii_lowercase();
    let cut = phrases
        .iter()
        .filter_map(|p| lower.find(&p.to_ascii_lowercase()))
        .min();
    match cut {
        Some(at) => text[..at].trim_end().to_string(),
        None => text.to_string(),
    }
}

pub fn strip_biomarkers(text: &str) -> String {
    strip_with(text, &TRANSITION_PHRASES)
}

pub const EDITABLE_FIELDS: [&str; 11] = [
    "organ_type",
    "disease",
    "tissue_type",
    "t_stage",
    "n_stage",
    "m_stage",
    "grade",
    "survival_status",
    "survival_months",
    "treatment_response",
    "annotation",
];

fn optional(value: &str) -> Option<String> {
    (value != "null").then(|| value.to_string())
}

/// Sets one metadata field from its text form. `"null"` clears optional
/// fields.
pub fn apply_edit(meta: &mut ClinicalMetadata, field: &str, value: &str) -> Result<()> {
    let bad = |what: &str| AtlasError::Argument(format!("invalid {field} value {value:?}: {what}"));
    let stage = |prefix: char| -> Result<Option<String>> {
        match optional(value) {
            Some(v) if !is_stage_token(&v, prefix) => Err(bad(&format!("expected {prefix}<code>"))),
            other => Ok(other),
        }
    };
    match field {
        "organ_type" => meta.organ_type = value.to_string(),
        "disease" => meta.disease = value.to_string(),
        "tissue_type" => meta.tissue_type = value.to_string(),
        "t_stage" => meta.t_stage = stage('T')?,
        "n_stage" => meta.n_stage = stage('N')?,
        "m_stage" => meta.m_stage = stage('M')?,
        "grade" => meta.grade = optional(value),
        "survival_status" => {
            meta.survival_status = match value.to_ascii_lowercase().as_str() {
                "null" => None,
                "alive" => Some(SurvivalStatus::Alive),
                "deceased" => Some(SurvivalStatus::Deceased),
                _ => return Err(bad("expected Alive or Deceased")),
            }
        }
        "survival_months" => {
            meta.survival_months = match value {
                "null" => None,
                v => Some(v.parse::<f64>().map_err(|_| bad("expected a number"))?),
            }
        }
        "treatment_response" => {
            meta.treatment_response = match value {
                "null" => None,
                v => Some(v.parse::<bool>().map_err(|_| bad("expected true or false"))?),
            }
        }
        "annotation" => meta.annotation = optional(value),
        other => return Err(AtlasError::Argument(format!("unknown metadata field {other:?}"))),
    }
    Ok(())
}

/// Applies `edits` and regenerates the metadata-only text.
pub fn perturb_metadata(
    meta: &ClinicalMetadata,
    edits: &BTreeMap<String, String>,
) -> Result<(ClinicalMetadata, String)> {
    let mut out = meta.clone();
    for (field, value) in edits {
        apply_edit(&mut out, field, value)?;
    }
    out.validate()?;
    let text = Template::default().clinical_text(Some(&out));
    Ok((out, text))
}

/// Parses `field=value[,field=value]`.
pub fn parse_edits(spec: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| AtlasError::Argument(format!("edit {part:?} is not field=value")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl fmt::Display for PatternCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternCategory::Sparse => "sparse",
            PatternCategory::Uniform => "uniform",
            PatternCategory::Clustered => "clustered",
            PatternCategory::Heterogeneous => "heterogeneous",
            PatternCategory::Scattered => "scattered",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn channel_mean_examples() {
        assert_eq!(patch_channel_mean(Array2::<u8>::zeros((4, 4)).view()), 0.0);
        assert_eq!(patch_channel_mean(array![[0u8, 0], [10, 30]].view()), 20.0);
        let mut rng = crate::rng::seeded(1);
        let p = Array2::from_shape_fn((16, 16), |_| if rng.random::<bool>() { 0 } else { rng.random::<u8>() });
        let nz: Vec<f64> = p.iter().filter(|v| **v != 0).map(|v| f64::from(*v)).collect();
        assert!((patch_channel_mean(p.view()) - nz.iter().sum::<f64>() / nz.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn loo_examples() {
        assert_eq!(loo_stats(&[4.0, 4.0, 4.0], 1).unwrap(), (0.0, 1.0));
        let (z, pi) = loo_stats(&[1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(pi, 1.0);
        assert!((z - 1.5 / (0.5 + EPS)).abs() < 1e-12);
        assert_eq!(loo_stats(&[0.5, 2.0, 3.0], 0).unwrap().1, 0.0);
        assert!(matches!(loo_stats(&[1.0], 0), Err(AtlasError::Degenerate(_))));
    }

    /// Rebuilds the remaining list explicitly and applies the textbook formulas.
    fn loo_oracle(means: &[f64], k: usize) -> (f64, f64) {
        let mut rest = means.to_vec();
        let mu = rest.remove(k);
        let m = rest.iter().sum::<f64>() / rest.len() as f64;
        let sd = (rest.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rest.len() as f64).sqrt();
        let below = rest.iter().filter(|v| **v <= mu).count();
        ((mu - m) / (sd + 1e-8), below as f64 / rest.len() as f64)
    }

    #[test]
    fn loo_matches_oracle_on_value_grid() {
        let grid = [0.0, 1.0, 2.5, 7.0];
        for n in 2..=6usize {
            let total = grid.len().pow(n as u32);
            for code in 0..total {
                let mut c = code;
                let means: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = grid[c % grid.len()];
                        c /= grid.len();
                        v
                    })
                    .collect();
                for k in 0..n {
                    let got = loo_stats(&means, k).unwrap();
                    let want = loo_oracle(&means, k);
                    assert!((got.0 - want.0).abs() < 1e-9 && got.1 == want.1, "{means:?} {k}");
                }
            }
        }
    }

    #[test]
    fn constant_plane_metrics() {
        let m = spatial_metrics(Array2::from_elem((16, 16), 120u8).view());
        assert_eq!(m.cv, 0.0);
        assert_eq!(m.clustering, 1.0);
        assert_eq!(m.coverage, 1.0);
        assert!((m.glcm_homogeneity.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.glcm_contrast, Some(0.0));
    }

    #[test]
    fn half_zero_plane_and_empty_plane() {
        let p = Array2::from_shape_fn((8, 8), |(y, _)| if y < 4 { 0u8 } else { 90 });
        assert_eq!(spatial_metrics(p.view()).coverage, 0.5);
        let e = spatial_metrics(Array2::<u8>::zeros((8, 8)).view());
        assert_eq!((e.coverage, e.glcm_contrast, e.glcm_homogeneity), (0.0, None, None));
        assert_eq!(assign_pattern(&e).category, PatternCategory::Sparse);
    }

    /// Lists every horizontal neighbour pair of an 8x8 plane by hand.
    fn glcm_oracle(p: &Array2<u8>) -> (f64, f64) {
        let mut pairs = Vec::new();
        for y in 0..8 {
            for x in 0..7 {
                let a = i64::from(p[[y, x]] >> 5);
                let b = i64::from(p[[y, x + 1]] >> 5);
                pairs.push((a, b));
                pairs.push((b, a));
            }
        }
        let n = pairs.len() as f64;
        let hom = pairs.iter().map(|(a, b)| 1.0 / (1.0 + ((a - b) * (a - b)) as f64)).sum::<f64>() / n;
        let con = pairs.iter().map(|(a, b)| ((a - b) * (a - b)) as f64).sum::<f64>() / n;
        (hom, con)
    }

    #[test]
    fn checkerboard_glcm() {
        let p = Array2::from_shape_fn((8, 8), |(y, x)| if (x + y) % 2 == 0 { 64u8 } else { 96 });
        let m = spatial_metrics(p.view());
        assert!((m.glcm_contrast.unwrap() - 1.0).abs() < 1e-15);
        assert!((m.glcm_homogeneity.unwrap() - 0.5).abs() < 1e-15);
        let (h, c) = glcm_oracle(&p);
        assert!((m.glcm_homogeneity.unwrap() - h).abs() < 1e-15 && (m.glcm_contrast.unwrap() - c).abs() < 1e-15);
    }

    #[test]
    fn random_glcm_matches_oracle() {
        let mut rng = crate::rng::seeded(9);
        for _ in 0..20 {
            let p = Array2::from_shape_fn((8, 8), |_| rng.random::<u8>());
            let m = spatial_metrics(p.view());
            let (h, c) = glcm_oracle(&p);
            assert!((m.glcm_homogeneity.unwrap() - h).abs() < 1e-12);
            assert!((m.glcm_contrast.unwrap() - c).abs() < 1e-12);
        }
    }

    fn metrics(cov: f64, cv: f64, clust: f64, hom: f64) -> SpatialMetrics {
        SpatialMetrics {
            cv,
            clustering: clust,
            glcm_homogeneity: Some(hom),
            glcm_contrast: Some(0.0),
            coverage: cov,
        }
    }

    #[test]
    fn rule_examples() {
        assert_eq!(assign_pattern(&metrics(0.05, 2.0, 0.9, 0.9)).category, PatternCategory::Sparse);
        assert_eq!(assign_pattern(&metrics(0.8, 0.3, 0.1, 0.7)).category, PatternCategory::Uniform);
        assert_eq!(assign_pattern(&metrics(0.2, 1.0, 0.4, 0.7)).category, PatternCategory::Scattered);
        assert_eq!(assign_pattern(&metrics(0.5, 0.9, 0.65, 0.1)).category, PatternCategory::Clustered);
        assert_eq!(assign_pattern(&metrics(0.5, 0.9, 0.5, 0.1)).category, PatternCategory::Heterogeneous);
        assert_eq!(assign_pattern(&metrics(0.9, 0.9, 0.8, 0.1)).category, PatternCategory::Clustered);
    }

    fn summary(pairs: &[(&str, f64)]) -> BiomarkerSummary {
        BiomarkerSummary {
            channels: pairs
                .iter()
                .map(|(n, z)| ChannelSummary {
                    name: n.to_string(),
                    mean: 100.0 + z * 17.3,
                    z: *z,
                    percentile: 0.25,
                })
                .collect(),
        }
    }

    fn pattern(c: PatternCategory, d: Density) -> SpatialPattern {
        SpatialPattern { category: c, density: d }
    }

    fn fixture_meta() -> ClinicalMetadata {
        let mut m = ClinicalMetadata::new("breast", "invasive ductal carcinoma", "tumor");
        m.t_stage = Some("T2".into());
        m.n_stage = Some("N0".into());
        m.m_stage = Some("M0".into());
        m.grade = Some("G2".into());
        m.survival_status = Some(SurvivalStatus::Deceased);
        m.survival_months = Some(41.0);
        m
    }

    #[test]
    fn golden_description() {
        let s = summary(&[("Vimentin", -1.4), ("PanCK", 2.2), ("CD8", 0.3)]);
        let p = [
            pattern(PatternCategory::Scattered, Density::Limited),
            pattern(PatternCategory::Uniform, Density::Extensive),
            pattern(PatternCategory::Clustered, Density::Partial),
        ];
        let got = synthesize_text(&s, &p, Some(&fixture_meta())).unwrap();
        let want = include_str!("../tests/fixtures/golden_description.txt").trim_end();
        assert_eq!(got, want);
    }

    #[test]
    fn no_metadata_starts_at_transition() {
        let s = summary(&[("PanCK", 2.0), ("Vimentin", -2.0)]);
        let p = [pattern(PatternCategory::Uniform, Density::Extensive); 2];
        let t = synthesize_text(&s, &p, None).unwrap();
        assert!(t.starts_with("Regarding the molecular profile,"));
        assert!(t.find("PanCK").unwrap() < t.find("Vimentin").unwrap());
        assert!(strip_biomarkers(&t).is_empty());
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_biomarkers("no phrase here"), "no phrase here");
        assert_eq!(strip_biomarkers("Tumor. In terms of protein expression, x"), "Tumor.");
        assert_eq!(strip_biomarkers("REGARDING THE MOLECULAR PROFILE, y"), "");
    }

    #[test]
    fn staging_edit_only_changes_staging_and_grade() {
        let meta = fixture_meta();
        let edits = parse_edits("t_stage=T4,n_stage=N2,m_stage=M1,grade=G3").unwrap();
        let (new, text) = perturb_metadata(&meta, &edits).unwrap();
        assert_eq!(new.t_stage.as_deref(), Some("T4"));
        let t = Template::default();
        let before = t.clinical_sentences(&meta);
        let after = t.clinical_sentences(&new);
        let changed: Vec<usize> = (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        assert_eq!(changed, vec![1, 2]);
        assert!(text.contains("T4N2M1"));
    }

    #[test]
    fn survival_edit_and_identity() {
        let meta = fixture_meta();
        let edits = parse_edits("survival_status=Alive").unwrap();
        let (new, _) = perturb_metadata(&meta, &edits).unwrap();
        let t = Template::default();
        let before = t.clinical_sentences(&meta);
        let after = t.clinical_sentences(&new);
        let changed: Vec<usize> = (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        assert_eq!(changed, vec![3]);
        let (same, text) = perturb_metadata(&meta, &BTreeMap::new()).unwrap();
        assert_eq!(same, meta);
        assert_eq!(text, t.clinical_text(Some(&meta)));
        assert!(perturb_metadata(&meta, &parse_edits("stage=T1").unwrap()).is_err());
        assert!(perturb_metadata(&meta, &parse_edits("t_stage=N1").unwrap()).is_err());
    }

    #[test]
    fn strip_recovers_clinical_prefix() {
        let meta = fixture_meta();
        let s = summary(&[("PanCK", 0.1)]);
        let p = [pattern(PatternCategory::Sparse, Density::Minimal)];
        let t = synthesize_text(&s, &p, Some(&meta)).unwrap();
        assert_eq!(strip_biomarkers(&t), Template::default().clinical_text(Some(&meta)));
    }

    proptest! {
        #[test]
        fn assign_pattern_is_total(
            cov in 0.0f64..=1.0, cv in 0.0f64..5.0, clust in 0.0f64..=1.0,
            hom in prop::option::of(0.0f64..=1.0)
        ) {
            let m = SpatialMetrics { cv, clustering: clust, glcm_homogeneity: hom, glcm_contrast: None, coverage: cov };
            let _ = assign_pattern(&m);
        }

        #[test]
        fn text_is_numeral_free(zs in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            let names = ["PanCK", "Vimentin", "GATA", "aSMA", "PDL", "HLA"];
            let pairs: Vec<(&str, f64)> = zs.iter().enumerate().map(|(i, z)| (names[i], *z)).collect();
            let s = summary(&pairs);
            let p = vec![pattern(PatternCategory::Heterogeneous, Density::Partial); zs.len()];
            let meta = ClinicalMetadata::new("lung", "adenocarcinoma", "tumor");
            let t = synthesize_text(&s, &p, Some(&meta)).unwrap();
            prop_assert!(!t.chars().any(|c| c.is_ascii_digit()));
            prop_assert_eq!(&t, &synthesize_text(&s, &p, Some(&meta)).unwrap());
        }
    }
}
