//! Exact cosine retrieval over a fixed gallery, plus the evaluations built on
//! it: Recall@K, KNN labels, zero-shot prompts, fusion scoring and
//! retrieval-based biomarker inference.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::ingest::{EmbeddingMatrix, Modality, SyntheticProvider};
use crate::linalg;
use crate::metrics::macro_f1;

mod snapshot;
pub use snapshot::{decode_index, encode_index, load_index, save_index, INDEX_MAGIC, INDEX_VERSION};

/// Default retrieval depth for biomarker inference.
pub const DEFAULT_INFERENCE_K: usize = 50;
/// Fusion weight used for biomarker inference.
pub const DEFAULT_INFERENCE_ALPHA: f64 = 0.8;
/// Channels present in fewer than this fraction of regions are dropped from PCC.
pub const CHANNEL_PRESENCE: f64 = 0.8;

pub const PROMPT_TEMPLATES: &str = include_str!("../templates/prompts.txt");

/// Zero-shot templates, one per non-comment line.
pub fn prompt_templates() -> Vec<String> {
    PROMPT_TEMPLATES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

pub fn alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

/// Immutable gallery of unit-norm embeddings with optional side tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    matrix: EmbeddingMatrix,
    lookup: HashMap<String, usize>,
    labels: BTreeMap<String, Vec<Option<String>>>,
    channels: Vec<String>,
    abundance: Option<Array2<f64>>,
    regions: Option<Vec<String>>,
}

impl EmbeddingIndex {
    /// Normalizes rows and checks ids are unique.
    pub fn build(embeddings: &EmbeddingMatrix) -> Result<Self> {
        let matrix = embeddings.normalized();
        let mut lookup = HashMap::with_capacity(matrix.len());
        for (i, id) in matrix.ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(AtlasError::Argument(format!("duplicate gallery id {id:?}")));
            }
        }
        Ok(EmbeddingIndex {
            matrix,
            lookup,
            labels: BTreeMap::new(),
            channels: Vec::new(),
            abundance: None,
            regions: None,
        })
    }

    pub fn with_labels(mut self, labels: BTreeMap<String, Vec<Option<String>>>) -> Result<Self> {
        for (name, col) in &labels {
            if col.len() != self.len() {
                return Err(AtlasError::Argument(format!(
                    "label column {name} has {} rows, index has {}",
                    col.len(),
                    self.len()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Per-row biomarker abundance; NaN marks a channel absent for that row.
    pub fn with_abundance(mut self, channels: Vec<String>, table: Array2<f64>) -> Result<Self> {
        if table.nrows() != self.len() || table.ncols() != channels.len() {
            return Err(AtlasError::Argument(format!(
                "abundance table is {}x{}, expected {}x{}",
                table.nrows(),
                table.ncols(),
                self.len(),
                channels.len()
            )));
        }
        self.channels = channels;
        self.abundance = Some(table);
        Ok(self)
    }

    pub fn with_regions(mut self, regions: Vec<String>) -> Result<Self> {
        if regions.len() != self.len() {
            return Err(AtlasError::Argument("region column length differs from index".into()));
        }
        self.regions = Some(regions);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn modality(&self) -> Modality {
        self.matrix.modality
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn ids(&self) -> &[String] {
        &self.matrix.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.matrix.rows.row(i)
    }

    pub fn labels(&self) -> &BTreeMap<String, Vec<Option<String>>> {
        &self.labels
    }

    pub fn label_column(&self, name: &str) -> Result<&[Option<String>]> {
        self.labels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| AtlasError::Argument(format!("index has no label column {name:?}")))
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn abundance(&self) -> Option<&Array2<f64>> {
        self.abundance.as_ref()
    }

    pub fn regions(&self) -> Option<&[String]> {
        self.regions.as_deref()
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(AtlasError::EmptyGallery);
        }
        if q.len() != self.dim() {
            return Err(AtlasError::Argument(format!(
                "query has dim {}, index has {}",
                q.len(),
                self.dim()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(AtlasError::Argument("query contains non-finite values".into()));
        }
        Ok(())
    }

    /// Dot product of `q` with every gallery row, accumulated in f64.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        Ok(self
            .matrix
            .rows
            .axis_iter(Axis(0))
            .map(|row| row.iter().zip(q).map(|(g, x)| f64::from(*g) * x).sum())
            .collect())
    }

    pub fn query(&self, q: &[f64], k: usize) -> Result<RankedList> {
        self.query_filtered(q, k, |_| true)
    }

    /// Like `query` but only items with `keep(i)` may be returned.
    pub fn query_filtered(&self, q: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Result<RankedList> {
        let scores = self.scores(q)?;
        Ok(self.ranked(&scores, k, keep))
    }

    pub fn query_fused(&self, fq: &FusionQuery, k: usize) -> Result<RankedList> {
        self.query(&fq.vector(false)?, k)
    }

    /// Runs many queries on scoped worker threads. Results are in input order
    /// and identical to calling `query` one at a time.
    pub fn batch_query(&self, queries: ArrayView2<f64>, k: usize) -> Result<Vec<RankedList>> {
        let n = queries.nrows();
        let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
        let chunk = n.div_ceil(workers.max(1)).max(1);
        let rows: Vec<Vec<f64>> = queries.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut out: Vec<Result<RankedList>> = Vec::with_capacity(n);
        std::thread::scope(|s| {
            let handles: Vec<_> = rows
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|q| self.query(q, k)).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                out.extend(h.join().expect("query worker panicked"));
            }
        });
        out.into_iter().collect()
    }

    fn ranked(&self, scores: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> RankedList {
        let indices = top_k(scores, k, keep);
        let status = if indices.len() < k {
            RankStatus::Clipped {
                requested: k,
                returned: indices.len(),
            }
        } else {
            RankStatus::Complete
        };
        RankedList {
            ids: indices.iter().map(|&i| self.matrix.ids[i].clone()).collect(),
            scores: indices.iter().map(|&i| scores[i]).collect(),
            indices,
            status,
        }
    }
}

/// Indices of the `k` highest scores among kept items, ordered by score
/// descending and then by ascending index.
pub fn top_k(scores: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| keep(i)).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        if k == 0 {
            return Vec::new();
        }
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RankStatus {
    Complete,
    /// Fewer than K items were available.
    Clipped { requested: usize, returned: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub status: RankStatus,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Weighted combination of an H&E and a text embedding. The fused vector is
/// deliberately not re-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionQuery {
    pub he: Vec<f64>,
    pub txt: Vec<f64>,
    pub alpha: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AtlasError::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

impl FusionQuery {
    pub fn new(he: Vec<f64>, txt: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if he.len() != txt.len() {
            return Err(AtlasError::Argument("fusion components differ in dimension".into()));
        }
        Ok(FusionQuery { he, txt, alpha })
    }

    pub fn vector(&self, renormalize: bool) -> Result<Vec<f64>> {
        check_alpha(self.alpha)?;
        if self.he.len() != self.txt.len() {
            return Err(AtlasError::Argument("fusion components differ in dimension".into()));
        }
        let mut v: Vec<f64> = self
            .he
            .iter()
            .zip(&self.txt)
            .map(|(h, t)| self.alpha * h + (1.0 - self.alpha) * t)
            .collect();
        if renormalize {
            linalg::normalize_vec(&mut v);
        }
        Ok(v)
    }
}

/// Score-level fusion: `α·s(he) + (1-α)·s(txt)` for every gallery item.
pub fn fuse_scores(index: &EmbeddingIndex, he: &[f64], txt: &[f64], alpha: f64, k: usize) -> Result<RankedList> {
    check_alpha(alpha)?;
    let s_he = index.scores(he)?;
    let s_txt = index.scores(txt)?;
    let fused: Vec<f64> = s_he.iter().zip(&s_txt).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    Ok(index.ranked(&fused, k, |_| true))
}

/// Picks the grid value with the largest objective; ties and NaN go to the
/// smaller value. Returns the winner and every evaluated point.
pub fn grid_alpha(grid: &[f64], mut objective: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(AtlasError::Argument("alpha grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    for a in &sorted {
        check_alpha(*a)?;
    }
    sorted.sort_by(f64::total_cmp);
    let mut evals = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for a in sorted {
        let v = objective(a)?;
        evals.push((a, v));
        match best {
            Some((_, bv)) if !(v > bv) => {}
            _ if v.is_nan() => {}
            _ => best = Some((a, v)),
        }
    }
    let alpha = best.map_or(evals[0].0, |b| b.0);
    Ok((alpha, evals))
}

/// Score-weighted mean of table rows. Per channel, rows with NaN are left out
/// of both numerator and denominator.
pub fn weighted_abundance(indices: &[usize], scores: &[f64], table: ArrayView2<f64>) -> Result<Vec<f64>> {
    if indices.len() != scores.len() {
        return Err(AtlasError::Argument("indices and scores differ in length".into()));
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(AtlasError::Degenerate(format!(
            "retrieved scores sum to {total}; weighting is undefined"
        )));
    }
    let mut out = Vec::with_capacity(table.ncols());
    for c in 0..table.ncols() {
        let (mut num, mut den) = (0.0, 0.0);
        for (&i, &s) in indices.iter().zip(scores) {
            let v = table[[i, c]];
            if v.is_finite() {
                num += s * v;
                den += s;
            }
        }
        out.push(if den != 0.0 { num / den } else { f64::NAN });
    }
    Ok(out)
}

pub fn infer_biomarkers(ranked: &RankedList, index: &EmbeddingIndex) -> Result<Vec<f64>> {
    let table = index
        .abundance()
        .ok_or_else(|| AtlasError::Argument("index has no abundance table".into()))?;
    weighted_abundance(&ranked.indices, &ranked.scores, table.view())
}

/// Fraction of queries whose ground-truth id appears in the first `k` results.
pub fn recall_at_k(ranked: &[(String, RankedList)], truth: &HashMap<String, String>, k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(AtlasError::Degenerate("no queries to evaluate".into()));
    }
    let mut hits = 0usize;
    for (qid, list) in ranked {
        let t = truth
            .get(qid)
            .ok_or_else(|| AtlasError::Argument(format!("no ground truth for query {qid:?}")))?;
        if list.ids.iter().take(k).any(|id| id == t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Recall@K for row-paired query and gallery matrices (query i pairs with
/// gallery row i). Computed from the rank of each true pair, with the same
/// tie rule as `top_k`.
pub fn paired_recall(queries: ArrayView2<f64>, gallery: ArrayView2<f64>, ks: &[usize]) -> Result<Vec<f64>> {
    if queries.dim() != gallery.dim() {
        return Err(AtlasError::Argument("paired matrices differ in shape".into()));
    }
    let n = queries.nrows();
    if n == 0 {
        return Err(AtlasError::EmptyGallery);
    }
    let s = queries.dot(&gallery.t());
    let ranks: Vec<usize> = (0..n)
        .map(|i| {
            let t = s[[i, i]];
            (0..n).filter(|&j| s[[i, j]] > t || (s[[i, j]] == t && j < i)).count()
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        .collect())
}

/// The six cross-modal directions, labelled like "he->mif".
pub fn six_direction_recall(z: [ArrayView2<f64>; 3], k: usize) -> Result<Vec<(String, f64)>> {
    let names = ["he", "mif", "txt"];
    let mut out = Vec::with_capacity(6);
    for (a, b) in [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)] {
        let r = paired_recall(z[a], z[b], &[k])?[0];
        out.push((format!("{}->{}", names[a], names[b]), r));
    }
    Ok(out)
}

/// Similarity-weighted vote among the top `k` neighbours. Unlabelled
/// neighbours cast no vote; equal totals go to the class whose best
/// neighbour ranks higher.
pub fn knn_classify(index: &EmbeddingIndex, q: &[f64], k: usize, column: &str) -> Result<Option<String>> {
    let labels = index.label_column(column)?;
    let ranked = index.query(q, k.max(1))?;
    Ok(knn_vote(&ranked, labels))
}

fn knn_vote(ranked: &RankedList, labels: &[Option<String>]) -> Option<String> {
    let mut totals: Vec<(&str, f64)> = Vec::new();
    for (&i, &s) in ranked.indices.iter().zip(&ranked.scores) {
        let Some(l) = labels[i].as_deref() else { continue };
        match totals.iter_mut().find(|(c, _)| *c == l) {
            Some(entry) => entry.1 += s,
            None => totals.push((l, s)),
        }
    }
    let mut best: Option<(&str, f64)> = None;
    for (c, t) in totals {
        if best.is_none_or(|(_, bt)| t > bt) {
            best = Some((c, t));
        }
    }
    best.map(|(c, _)| c.to_string())
}

/// Produces text-space embeddings for prompts.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

impl TextEmbedder for SyntheticProvider {
    fn dim(&self) -> usize {
        SyntheticProvider::dim(self)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_text(text).into_iter().map(f64::from).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateResult {
    pub template: String,
    pub predictions: Vec<String>,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub per_template: Vec<TemplateResult>,
    pub f1_mean: f64,
    /// Population standard deviation across templates.
    pub f1_std: f64,
    pub random_f1_mean: f64,
    pub random_f1_std: f64,
}

pub const RANDOM_BASELINE_REPEATS: usize = 10;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    (linalg::mean(xs), linalg::variance(xs).sqrt())
}

/// Classifies each image row by its nearest class prototype, one prototype
/// per (template, class). `embed` maps prompt text into the shared space.
pub fn zero_shot(
    images: ArrayView2<f64>,
    truth: &[String],
    classes: &[String],
    templates: &[String],
    embed: impl Fn(&str) -> Result<Vec<f64>>,
    seed: u64,
) -> Result<ZeroShotReport> {
    if templates.is_empty() {
        return Err(AtlasError::Argument("no prompt templates".into()));
    }
    if classes.len() < 2 {
        return Err(AtlasError::Argument("zero-shot needs at least two classes".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
        return Err(AtlasError::Argument(format!("duplicate class name {dup:?}")));
    }
    if truth.len() != images.nrows() {
        return Err(AtlasError::Argument("one truth label per image row is required".into()));
    }
    let mut per_template = Vec::with_capacity(templates.len());
    for t in templates {
        let mut protos = Array2::<f64>::zeros((classes.len(), images.ncols()));
        for (c, name) in classes.iter().enumerate() {
            let mut v = embed(&t.replace("{}", name))?;
            if v.len() != images.ncols() {
                return Err(AtlasError::Argument(format!(
                    "prompt embedding has dim {}, images have {}",
                    v.len(),
                    images.ncols()
                )));
            }
            linalg::normalize_vec(&mut v);
            protos.row_mut(c).assign(&ArrayView1::from(&v));
        }
        let sims = images.dot(&protos.t());
        let predictions: Vec<String> = sims
            .rows()
            .into_iter()
            .map(|r| classes[top_k(r.as_slice().expect("contiguous"), 1, |_| true)[0]].clone())
            .collect();
        let f1 = macro_f1(truth, &predictions)?;
        per_template.push(TemplateResult {
            template: t.clone(),
            predictions,
            macro_f1: f1,
        });
    }
    let f1s: Vec<f64> = per_template.iter().map(|r| r.macro_f1).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let mut rng = crate::rng::substream(seed, "zero_shot_random");
    let random: Vec<f64> = (0..RANDOM_BASELINE_REPEATS)
        .map(|_| {
            let pred: Vec<String> = truth
                .iter()
                .map(|_| classes[rng.random_range(0..classes.len())].clone())
                .collect();
            macro_f1(truth, &pred)
        })
        .collect::<Result<_>>()?;
    let (random_f1_mean, random_f1_std) = mean_std(&random);
    Ok(ZeroShotReport {
        per_template,
        f1_mean,
        f1_std,
        random_f1_mean,
        random_f1_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PccReport {
    pub channels: Vec<String>,
    /// Mean PCC over valid regions; `None` when no region produced a value.
    pub per_channel: Vec<Option<f64>>,
    /// Fraction of contributing regions where the channel is present.
    pub presence: Vec<f64>,
    pub retained: Vec<bool>,
    /// Mean over retained channels with a defined PCC.
    pub aggregate: Option<f64>,
    /// Region/channel pairs skipped for zero variance.
    pub skipped: usize,
    pub regions_used: usize,
}

/// Per region and channel, Pearson between predicted and true abundance
/// across patches. A channel is present in a region when every truth entry
/// is finite there. Regions with fewer than two patches do not contribute.
pub fn pcc_evaluate(
    pred: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    regions: &[String],
    channels: &[String],
    min_presence: f64,
) -> Result<PccReport> {
    if pred.dim() != truth.dim() || regions.len() != truth.nrows() || channels.len() != truth.ncols() {
        return Err(AtlasError::Argument("prediction, truth, region and channel shapes differ".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in regions.iter().enumerate() {
        groups.entry(r.as_str()).or_default().push(i);
    }
    let used: Vec<&Vec<usize>> = groups.values().filter(|rows| rows.len() >= 2).collect();
    let c_count = truth.ncols();
    let mut per_channel = Vec::with_capacity(c_count);
    let mut presence = Vec::with_capacity(c_count);
    let mut skipped = 0;
    for c in 0..c_count {
        let mut present = 0usize;
        let mut values = Vec::new();
        for rows in &used {
            let t: Vec<f64> = rows.iter().map(|&i| truth[[i, c]]).collect();
            if t.iter().any(|v| !v.is_finite()) {
                continue;
            }
            present += 1;
            let p: Vec<f64> = rows.iter().map(|&i| pred[[i, c]]).collect();
            match crate::stats::pearson(&p, &t) {
                Ok(r) => values.push(r),
                Err(_) => skipped += 1,
            }
        }
        presence.push(if used.is_empty() { 0.0 } else { present as f64 / used.len() as f64 });
        per_channel.push((!values.is_empty()).then(|| linalg::mean(&values)));
    }
    let retained: Vec<bool> = presence.iter().map(|p| *p >= min_presence).collect();
    let kept: Vec<f64> = per_channel
        .iter()
        .zip(&retained)
        .filter_map(|(v, keep)| if *keep { *v } else { None })
        .collect();
    Ok(PccReport {
        channels: channels.to_vec(),
        per_channel,
        presence,
        retained,
        aggregate: (!kept.is_empty()).then(|| linalg::mean(&kept)),
        skipped,
        regions_used: used.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = crate::rng::seeded(seed);
        Array2::from_shape_simple_fn((n, d), || rng.sample::<f32, _>(StandardNormal))
    }

    fn index_from(rows: Array2<f32>) -> EmbeddingIndex {
        let ids = (0..rows.nrows()).map(|i| format!("g{i}")).collect();
        EmbeddingIndex::build(&EmbeddingMatrix::new(Modality::Mif, rows, ids).unwrap()).unwrap()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        linalg::normalize_vec(&mut v);
        v
    }

    #[test]
    fn empty_index_rejects_queries() {
        let idx = index_from(Array2::zeros((0, 4)));
        assert!(idx.is_empty());
        assert!(matches!(idx.query(&[1.0, 0.0, 0.0, 0.0], 3), Err(AtlasError::EmptyGallery)));
    }

    #[test]
    fn prenormalized_rows_are_unchanged() {
        let mut rows = random_matrix(20, 6, 1);
        linalg::normalize_rows_f32(&mut rows);
        let idx = index_from(rows.clone());
        assert!((&idx.embeddings().rows - &rows).iter().all(|d| d.abs() < 1e-7));
    }

    #[test]
    fn duplicate_ids_fail() {
        let m = EmbeddingMatrix::new(Modality::He, Array2::ones((2, 3)), vec!["a".into(), "a".into()]).unwrap();
        assert!(EmbeddingIndex::build(&m).is_err());
    }

    #[test]
    fn self_query_ranks_first_and_k_is_clipped() {
        let idx = index_from(random_matrix(30, 8, 2));
        let q: Vec<f64> = idx.row(7).iter().map(|v| f64::from(*v)).collect();
        let r = idx.query(&q, 5).unwrap();
        assert_eq!(r.indices[0], 7);
        assert!((r.scores[0] - 1.0).abs() < 1e-6);
        let all = idx.query(&q, 100).unwrap();
        assert_eq!(all.len(), 30);
        assert_eq!(all.status, RankStatus::Clipped { requested: 100, returned: 30 });
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let idx = index_from(array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        let r = idx.query(&[1.0, 0.0], 3).unwrap();
        assert_eq!(r.indices, vec![0, 2, 3]);
    }

    #[test]
    fn query_matches_sort_oracle() {
        let idx = index_from(random_matrix(50, 10, 3));
        let q = unit(&random_matrix(1, 10, 4).row(0).iter().map(|v| f64::from(*v)).collect::<Vec<_>>());
        let r = idx.query(&q, 50).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..50)
            .map(|i| (idx.row(i).iter().zip(&q).map(|(a, b)| f64::from(*a) * b).sum(), i))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(r.indices, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    #[test]
    fn batch_query_matches_single_queries() {
        let idx = index_from(random_matrix(40, 6, 5));
        let qs = random_matrix(13, 6, 6).mapv(f64::from);
        let batch = idx.batch_query(qs.view(), 4).unwrap();
        for (i, r) in batch.iter().enumerate() {
            assert_eq!(r, &idx.query(qs.row(i).as_slice().unwrap(), 4).unwrap());
        }
    }

    #[test]
    fn fusion_endpoints_and_identity() {
        let idx = index_from(random_matrix(60, 8, 7));
        let he = unit(&random_matrix(1, 8, 8).mapv(f64::from).row(0).to_vec());
        let txt = unit(&random_matrix(1, 8, 9).mapv(f64::from).row(0).to_vec());
        let at_one = idx.query_fused(&FusionQuery::new(he.clone(), txt.clone(), 1.0).unwrap(), 60).unwrap();
        assert_eq!(at_one.indices, idx.query(&he, 60).unwrap().indices);
        let at_zero = fuse_scores(&idx, &he, &txt, 0.0, 60).unwrap();
        assert_eq!(at_zero.indices, idx.query(&txt, 60).unwrap().indices);
        let fq = FusionQuery::new(he.clone(), txt.clone(), 0.3).unwrap();
        let a = idx.query_fused(&fq, 60).unwrap();
        let b = fuse_scores(&idx, &he, &txt, 0.3, 60).unwrap();
        assert_eq!(a.indices, b.indices);
        assert!(a.scores.iter().zip(&b.scores).all(|(x, y)| (x - y).abs() < 1e-12));
        let renorm = idx.query(&fq.vector(true).unwrap(), 60).unwrap();
        assert_eq!(renorm.indices, a.indices);
        assert!(FusionQuery::new(he, txt, 1.5).is_err());
    }

    #[test]
    fn grid_alpha_tie_rules() {
        let (a, _) = grid_alpha(&alpha_grid(), |_| Ok(1.0)).unwrap();
        assert_eq!(a, 0.0);
        let (a, _) = grid_alpha(&[0.4], |_| Ok(-3.0)).unwrap();
        assert_eq!(a, 0.4);
        let (a, evals) = grid_alpha(&[1.0, 0.0, 0.5], |x| Ok(-(x - 0.5f64).abs())).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(evals[0].0, 0.0);
        assert!(grid_alpha(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn grid_alpha_ignores_noise_text() {
        // H&E queries are noisy copies of their gallery row; text is unrelated.
        let n = 300;
        let idx = index_from(random_matrix(n, 8, 10));
        let mut he = idx.embeddings().rows.mapv(f64::from) + random_matrix(n, 8, 18).mapv(|v| 0.25 * f64::from(v));
        linalg::normalize_rows_f64(&mut he);
        let mut noise = random_matrix(n, 8, 11).mapv(f64::from);
        linalg::normalize_rows_f64(&mut noise);
        let (a, evals) = grid_alpha(&alpha_grid(), |alpha| {
            let mut mrr = 0.0;
            for i in 0..n {
                let fq = FusionQuery::new(he.row(i).to_vec(), noise.row(i).to_vec(), alpha)?;
                let r = idx.query_fused(&fq, n)?;
                mrr += 1.0 / (1 + r.indices.iter().position(|&j| j == i).unwrap()) as f64;
            }
            Ok(mrr / n as f64)
        })
        .unwrap();
        assert_eq!(a, 1.0, "{evals:?}");
    }

    #[test]
    fn weighted_abundance_examples() {
        let table = array![[10.0, 1.0], [30.0, 5.0], [7.0, f64::NAN]];
        assert_eq!(weighted_abundance(&[2], &[0.4], table.view()).unwrap()[0], 7.0);
        assert_eq!(weighted_abundance(&[0, 1], &[0.5, 0.5], table.view()).unwrap(), vec![20.0, 3.0]);
        let skip_nan = weighted_abundance(&[1, 2], &[1.0, 3.0], table.view()).unwrap();
        assert_eq!(skip_nan[1], 5.0);
        assert!(weighted_abundance(&[0, 1], &[0.5, -0.5], table.view()).is_err());
    }

    #[test]
    fn weighted_abundance_matches_direct_sum() {
        let mut rng = crate::rng::seeded(12);
        let table = Array2::from_shape_simple_fn((20, 4), || rng.random::<f64>() * 100.0);
        let idx = [3usize, 17, 0, 9, 11];
        let s: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let got = weighted_abundance(&idx, &s, table.view()).unwrap();
        for c in 0..4 {
            let num: f64 = (0..5).map(|j| s[j] * table[[idx[j], c]]).sum();
            let den: f64 = s.iter().sum();
            assert!((got[c] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_basics() {
        let rows = random_matrix(25, 5, 13);
        let z = rows.mapv(f64::from);
        let mut zn = z.clone();
        linalg::normalize_rows_f64(&mut zn);
        let r = paired_recall(zn.view(), zn.view(), &[1, 25]).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        let idx = index_from(rows);
        let truth: HashMap<String, String> = HashMap::new();
        let list = idx.query(&zn.row(0).to_vec(), 1).unwrap();
        assert!(recall_at_k(&[("g0".into(), list)], &truth, 1).is_err());
    }

    #[test]
    fn paired_recall_agrees_with_index_queries() {
        let g = random_matrix(40, 6, 14);
        let idx = index_from(g.clone());
        let q = random_matrix(40, 6, 15).mapv(f64::from);
        let gal = idx.embeddings().rows.mapv(f64::from);
        let truth: HashMap<String, String> = (0..40).map(|i| (format!("q{i}"), format!("g{i}"))).collect();
        let lists: Vec<(String, RankedList)> =
            (0..40).map(|i| (format!("q{i}"), idx.query(&q.row(i).to_vec(), 10).unwrap())).collect();
        for k in [1, 5, 10] {
            let a = recall_at_k(&lists, &truth, k).unwrap();
            let b = paired_recall(q.view(), gal.view(), &[k]).unwrap()[0];
            assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn random_recall_sits_at_chance() {
        let (n, k) = (200, 10);
        let mut total = 0.0;
        let seeds = 50;
        for s in 0..seeds {
            let q = random_matrix(n, 16, 1000 + s).mapv(f64::from);
            let g = random_matrix(n, 16, 2000 + s).mapv(f64::from);
            total += paired_recall(q.view(), g.view(), &[k]).unwrap()[0];
        }
        let mean = total / seeds as f64;
        let p = k as f64 / n as f64;
        let sigma = (p * (1.0 - p) / (n as f64 * seeds as f64)).sqrt();
        assert!((mean - p).abs() < 3.0 * sigma, "{mean}");
    }

    fn labelled(column: Vec<Option<&str>>, rows: Array2<f32>) -> EmbeddingIndex {
        let mut labels = BTreeMap::new();
        labels.insert("disease".to_string(), column.into_iter().map(|s| s.map(String::from)).collect());
        index_from(rows).with_labels(labels).unwrap()
    }

    #[test]
    fn knn_weighted_votes() {
        // Scores against q = e0: 0.9 (B), 0.4 (A), 0.4 (A).
        let rows = array![
            [0.9f32, 0.435_889_9],
            [0.4, 0.916_515_1],
            [0.4, -0.916_515_1],
            [-1.0, 0.0]
        ];
        let idx = labelled(vec![Some("B"), Some("A"), Some("A"), Some("A")], rows);
        assert_eq!(knn_classify(&idx, &[1.0, 0.0], 3, "disease").unwrap().as_deref(), Some("B"));
        assert_eq!(knn_classify(&idx, &[1.0, 0.0], 1, "disease").unwrap().as_deref(), Some("B"));
        assert!(knn_classify(&idx, &[1.0, 0.0], 1, "organ").is_err());
    }

    #[test]
    fn knn_single_class_neighbours() {
        let idx = labelled(vec![Some("x"); 10], random_matrix(10, 4, 16));
        for k in 1..=10 {
            assert_eq!(knn_classify(&idx, &[0.5, 0.5, 0.5, 0.5], k, "disease").unwrap().as_deref(), Some("x"));
        }
    }

    #[test]
    fn zero_shot_separable_prototypes() {
        let classes: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let centres = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let mut images = Array2::zeros((9, 3));
        let mut truth = Vec::new();
        for i in 0..9 {
            images.row_mut(i).assign(&ArrayView1::from(&centres[i % 3]));
            truth.push(classes[i % 3].clone());
        }
        let embed = |t: &str| -> Result<Vec<f64>> {
            let c = ["a", "b", "c"].iter().position(|c| t.contains(&format!("<{c}>"))).unwrap();
            Ok(centres[c].clone())
        };
        let report = zero_shot(images.view(), &truth, &classes, &["<{}>".to_string()], embed, 0).unwrap();
        assert_eq!(report.f1_mean, 1.0);
        assert_eq!(report.f1_std, 0.0);
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(zero_shot(images.view(), &truth, &dup, &["{}".to_string()], embed, 0).is_err());
    }

    #[test]
    fn zero_shot_random_baseline_near_chance() {
        let classes: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let truth: Vec<String> = (0..400).map(|i| classes[i % 4].clone()).collect();
        let images = Array2::from_elem((400, 2), 0.5f64.sqrt());
        let embed = |_: &str| -> Result<Vec<f64>> { Ok(vec![1.0, 0.0]) };
        let report = zero_shot(images.view(), &truth, &classes, &prompt_templates(), embed, 3).unwrap();
        assert!((report.random_f1_mean - 0.25).abs() < 0.05, "{}", report.random_f1_mean);
        assert_eq!(report.per_template.len(), 5);
    }

    #[test]
    fn pcc_examples() {
        let regions: Vec<String> = ["r1", "r1", "r1", "r2", "r2", "r3", "r3", "r4"].map(String::from).to_vec();
        let channels = vec!["c0".to_string(), "c1".to_string()];
        let truth = array![
            [1.0, 2.0],
            [2.0, 1.0],
            [4.0, 3.0],
            [1.0, f64::NAN],
            [3.0, f64::NAN],
            [2.0, 1.0],
            [5.0, 7.0],
            [9.0, 9.0]
        ];
        let same = pcc_evaluate(truth.view(), truth.view(), &regions, &channels, CHANNEL_PRESENCE).unwrap();
        assert_eq!(same.regions_used, 3);
        assert!((same.per_channel[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((same.presence[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(same.retained, vec![true, false]);
        assert!((same.aggregate.unwrap() - 1.0).abs() < 1e-12);
        let neg = truth.mapv(|v| -v);
        let flipped = pcc_evaluate(neg.view(), truth.view(), &regions, &channels, CHANNEL_PRESENCE).unwrap();
        assert!((flipped.per_channel[0].unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcc_matches_definition_and_counts_skips() {
        let mut rng = crate::rng::seeded(17);
        let truth = Array2::from_shape_simple_fn((12, 2), || rng.random::<f64>());
        let pred = Array2::from_shape_simple_fn((12, 2), || rng.random::<f64>());
        let regions: Vec<String> = (0..12).map(|i| format!("r{}", i / 4)).collect();
        let mut t = truth.clone();
        for i in 8..12 {
            t[[i, 1]] = 0.5;
        }
        let rep = pcc_evaluate(pred.view(), t.view(), &regions, &["a".into(), "b".into()], 0.8).unwrap();
        assert_eq!(rep.skipped, 1);
        let def = |x: &[f64], y: &[f64]| {
            let (mx, my) = (linalg::mean(x), linalg::mean(y));
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            sxy / (sxx * syy).sqrt()
        };
        let mut want = 0.0;
        for r in 0..3 {
            let rows: Vec<usize> = (4 * r..4 * r + 4).collect();
            let p: Vec<f64> = rows.iter().map(|&i| pred[[i, 0]]).collect();
            let tt: Vec<f64> = rows.iter().map(|&i| t[[i, 0]]).collect();
            want += def(&p, &tt) / 3.0;
        }
        assert!((rep.per_channel[0].unwrap() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ranking_ignores_positive_query_scale(seed in 0u64..500, scale in 0.01f64..100.0) {
            let idx = index_from(random_matrix(30, 5, seed));
            let q: Vec<f64> = random_matrix(1, 5, seed + 1).row(0).iter().map(|v| f64::from(*v)).collect();
            let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
            prop_assert_eq!(idx.query(&q, 10).unwrap().indices, idx.query(&scaled, 10).unwrap().indices);
        }

        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500) {
            let q = random_matrix(30, 4, seed).mapv(f64::from);
            let g = random_matrix(30, 4, seed + 7).mapv(f64::from);
            let ks: Vec<usize> = (1..=30).collect();
            let r = paired_recall(q.view(), g.view(), &ks).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r[29], 1.0);
        }

        #[test]
        fn knn_k1_is_rank_one_label(seed in 0u64..500) {
            let labels: Vec<Option<&str>> = (0..20).map(|i| Some(["p", "q", "r"][i % 3])).collect();
            let idx = labelled(labels, random_matrix(20, 4, seed));
            let q: Vec<f64> = random_matrix(1, 4, seed + 3).row(0).iter().map(|v| f64::from(*v)).collect();
            let top = idx.query(&q, 1).unwrap().indices[0];
            let got = knn_classify(&idx, &q, 1, "disease").unwrap();
            prop_assert_eq!(got.as_deref(), idx.label_column("disease").unwrap()[top].as_deref());
        }
    }
}
