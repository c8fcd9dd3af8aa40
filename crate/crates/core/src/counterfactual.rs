//! Metadata-perturbation analysis: paired fused retrieval under original and
//! edited clinical text, composition shift, microenvironment clustering and
//! per-cluster biomarker shift tests, PCA of shift vectors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::retrieval::{weighted_abundance, EmbeddingIndex, FusionQuery, RankedList};
use crate::rng::substream;
use crate::stats::{bh_fdr, mann_whitney_u, pearson, wilcoxon_signed_rank, Alternative, TestResult};

pub mod planted;
pub use planted::{planted_cohort, PlantedCohort, PlantedConfig};

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_K: usize = 50;
pub const DEFAULT_CLUSTERS: usize = 4;
pub const DEFAULT_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;
pub const PROTOTYPES_PER_CLUSTER: usize = 3;
pub const MIN_CLUSTER_SIZE: usize = 5;
pub const DEFAULT_Q: f64 = 0.05;

/// Stage components of a concatenated TNM string such as "T2N0M0".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Tnm {
    pub t: Option<String>,
    pub n: Option<String>,
    pub m: Option<String>,
}

/// Splits on the T, N and M prefixes; each must carry an alphanumeric
/// suffix. Anything else is unparseable.
pub fn parse_tnm(s: &str) -> Option<Tnm> {
    let s = s.trim();
    let bytes = s.as_bytes();
    let starts: Vec<usize> = (0..bytes.len()).filter(|&i| matches!(bytes[i], b'T' | b'N' | b'M')).collect();
    if starts.first() != Some(&0) {
        return None;
    }
    let mut out = Tnm::default();
    for (k, &a) in starts.iter().enumerate() {
        let b = starts.get(k + 1).copied().unwrap_or(bytes.len());
        let part = &s[a..b];
        if part.len() < 2 || !part[1..].chars().all(|c| c.is_ascii_alphanumeric()) {
            return None;
        }
        let slot = match part.as_bytes()[0] {
            b'T' => &mut out.t,
            b'N' => &mut out.n,
            _ => &mut out.m,
        };
        if slot.is_some() {
            return None;
        }
        *slot = Some(part.to_string());
    }
    Some(out)
}

/// One stage component per row of a TNM label column.
pub fn stage_column(tnm: &[Option<String>], prefix: char) -> Vec<Option<String>> {
    tnm.iter()
        .map(|v| {
            let parsed = parse_tnm(v.as_deref()?)?;
            match prefix.to_ascii_uppercase() {
                'T' => parsed.t,
                'N' => parsed.n,
                _ => parsed.m,
            }
        })
        .collect()
}

/// Retrieval sets for each query under the original and counterfactual text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualRun {
    pub alpha: f64,
    pub k: usize,
    pub query_ids: Vec<String>,
    pub original: Vec<RankedList>,
    pub counterfactual: Vec<RankedList>,
}

/// Fused retrieval for every query under both text conditions. The same
/// text embedding is broadcast over all queries within a condition.
pub fn run_pair(
    index: &EmbeddingIndex,
    query_ids: &[String],
    query_he: ArrayView2<f64>,
    control_txt: &[f64],
    cf_txt: &[f64],
    alpha: f64,
    k: usize,
) -> Result<CounterfactualRun> {
    if query_ids.len() != query_he.nrows() {
        return Err(AtlasError::Argument("one id per query row is required".into()));
    }
    if index.abundance().is_none() {
        return Err(AtlasError::Argument("counterfactual runs need an abundance table".into()));
    }
    let mut original = Vec::with_capacity(query_ids.len());
    let mut counterfactual = Vec::with_capacity(query_ids.len());
    for row in query_he.rows() {
        let he = row.to_vec();
        original.push(index.query_fused(&FusionQuery::new(he.clone(), control_txt.to_vec(), alpha)?, k)?);
        counterfactual.push(index.query_fused(&FusionQuery::new(he, cf_txt.to_vec(), alpha)?, k)?);
    }
    Ok(CounterfactualRun {
        alpha,
        k,
        query_ids: query_ids.to_vec(),
        original,
        counterfactual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionTest {
    /// Rank-sum between the two lists of per-query proportions.
    RankSum,
    /// Signed-rank on the per-query proportion differences.
    SignedRank,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryShift {
    pub category: String,
    pub original: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub mean_original: f64,
    pub mean_counterfactual: f64,
    pub mean_shift: f64,
    pub test: TestResult,
    pub adjusted_p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionReport {
    pub column: String,
    pub test: CompositionTest,
    pub categories: Vec<CategoryShift>,
    /// Mean fraction of retrieved items without a label, per condition.
    pub unlabeled: [f64; 2],
}

fn proportions(list: &RankedList, labels: &[Option<String>], category: &str) -> f64 {
    if list.is_empty() {
        return 0.0;
    }
    let hits = list.indices.iter().filter(|&&j| labels[j].as_deref() == Some(category)).count();
    hits as f64 / list.len() as f64
}

fn unlabeled_fraction(list: &RankedList, labels: &[Option<String>]) -> f64 {
    if list.is_empty() {
        return 0.0;
    }
    list.indices.iter().filter(|&&j| labels[j].is_none()).count() as f64 / list.len() as f64
}

/// Per-category proportion lists, one test per category, BH across categories.
pub fn composition_shift(
    run: &CounterfactualRun,
    index: &EmbeddingIndex,
    column: &str,
    categories: &[String],
    test: CompositionTest,
    q: f64,
) -> Result<CompositionReport> {
    let labels = index.label_column(column)?;
    composition_shift_with(run, labels, column, categories, test, q)
}

/// Like `composition_shift` with an explicit label column (e.g. one derived
/// with `stage_column`).
pub fn composition_shift_with(
    run: &CounterfactualRun,
    labels: &[Option<String>],
    column: &str,
    categories: &[String],
    test: CompositionTest,
    q: f64,
) -> Result<CompositionReport> {
    if categories.is_empty() {
        return Err(AtlasError::Argument("category set is empty".into()));
    }
    if run.original.is_empty() {
        return Err(AtlasError::Degenerate("run has no queries".into()));
    }
    let mut shifts = Vec::with_capacity(categories.len());
    for c in categories {
        let p0: Vec<f64> = run.original.iter().map(|l| proportions(l, labels, c)).collect();
        let p1: Vec<f64> = run.counterfactual.iter().map(|l| proportions(l, labels, c)).collect();
        let result = match test {
            CompositionTest::RankSum => mann_whitney_u(&p1, &p0, Alternative::TwoSided)?,
            CompositionTest::SignedRank => {
                let d: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
                wilcoxon_signed_rank(&d, Alternative::TwoSided)?
            }
        };
        let m0 = crate::linalg::mean(&p0);
        let m1 = crate::linalg::mean(&p1);
        shifts.push(CategoryShift {
            category: c.clone(),
            original: p0,
            counterfactual: p1,
            mean_original: m0,
            mean_counterfactual: m1,
            mean_shift: m1 - m0,
            test: result,
            adjusted_p: f64::NAN,
            significant: false,
        });
    }
    let raw: Vec<f64> = shifts.iter().map(|s| s.test.p_value).collect();
    let fdr = bh_fdr(&raw, q)?;
    for (s, (adj, rej)) in shifts.iter_mut().zip(fdr.adjusted.iter().zip(&fdr.rejected)) {
        s.adjusted_p = *adj;
        s.significant = *rej;
    }
    let unl = |lists: &[RankedList]| crate::linalg::mean(&lists.iter().map(|l| unlabeled_fraction(l, labels)).collect::<Vec<_>>());
    Ok(CompositionReport {
        column: column.to_string(),
        test,
        categories: shifts,
        unlabeled: [unl(&run.original), unl(&run.counterfactual)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub trace: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, row.as_slice().expect("contiguous"));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = data.len();
    let d = data[0].len();
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&ndarray::ArrayView1::from(&data[first]));
    let mut dist: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[first])).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&ndarray::ArrayView1::from(&data[pick]));
        for (i, x) in data.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(x, &data[pick]));
        }
    }
    centroids
}

fn lloyd(data: &[Vec<f64>], mut centroids: Array2<f64>, max_iter: usize) -> (Array2<f64>, Vec<usize>, f64, usize, Vec<f64>) {
    let (n, k) = (data.len(), centroids.nrows());
    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for (i, x) in data.iter().enumerate() {
            let (c, d) = nearest(x, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
            dists[i] = d;
            inertia += d;
        }
        trace.push(inertia);
        if !changed || iterations >= max_iter {
            return (centroids, assign, inertia, iterations, trace);
        }
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, x) in data.iter().enumerate() {
            counts[assign[i]] += 1;
            sums.row_mut(assign[i]).zip_mut_with(&ndarray::ArrayView1::from(x), |s, v| *s += v);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Reseed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                centroids.row_mut(c).assign(&ndarray::ArrayView1::from(&data[far]));
            }
        }
    }
}

/// k-means++ seeding and Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans(data: ArrayView2<f64>, k: usize, seed: u64, restarts: usize) -> Result<ClusterModel> {
    let n = data.nrows();
    if k == 0 {
        return Err(AtlasError::Argument("k must be positive".into()));
    }
    if n < k {
        return Err(AtlasError::Argument(format!("{n} points cannot form {k} clusters")));
    }
    let rows: Vec<Vec<f64>> = data.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut rng = substream(seed, "kmeans");
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp(&rows, k, &mut rng);
        let (centroids, assignments, inertia, iterations, trace) = lloyd(&rows, init, KMEANS_MAX_ITER);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(ClusterModel {
                k,
                centroids,
                assignments,
                inertia,
                iterations,
                trace,
                seed,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Up to `m` members per cluster, nearest to the centroid first.
pub fn select_prototypes(data: ArrayView2<f64>, model: &ClusterModel, m: usize) -> Vec<Vec<usize>> {
    (0..model.k)
        .map(|c| {
            let centroid = model.centroids.row(c);
            let mut members: Vec<(f64, usize)> = model
                .members(c)
                .into_iter()
                .map(|i| (crate::linalg::squared_distance(data.row(i), centroid), i))
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            members.into_iter().take(m).map(|(_, i)| i).collect()
        })
        .collect()
}

/// Per-query weighted abundance under both conditions and their difference.
/// Channels that are not finite for every query are dropped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftMatrix {
    pub query_ids: Vec<String>,
    pub channels: Vec<String>,
    pub original: Array2<f64>,
    pub counterfactual: Array2<f64>,
    pub d: Array2<f64>,
}

pub fn shift_matrix(run: &CounterfactualRun, index: &EmbeddingIndex) -> Result<ShiftMatrix> {
    let table = index
        .abundance()
        .ok_or_else(|| AtlasError::Argument("index has no abundance table".into()))?;
    let n = run.original.len();
    let c = table.ncols();
    let mut orig = Array2::zeros((n, c));
    let mut cf = Array2::zeros((n, c));
    for i in 0..n {
        let a = weighted_abundance(&run.original[i].indices, &run.original[i].scores, table.view())?;
        let b = weighted_abundance(&run.counterfactual[i].indices, &run.counterfactual[i].scores, table.view())?;
        orig.row_mut(i).assign(&ndarray::ArrayView1::from(&a));
        cf.row_mut(i).assign(&ndarray::ArrayView1::from(&b));
    }
    let valid: Vec<usize> = (0..c)
        .filter(|&j| orig.column(j).iter().chain(cf.column(j).iter()).all(|v| v.is_finite()))
        .collect();
    let orig = orig.select(Axis(1), &valid);
    let cf = cf.select(Axis(1), &valid);
    Ok(ShiftMatrix {
        query_ids: run.query_ids.clone(),
        channels: valid.iter().map(|&j| index.channels()[j].clone()).collect(),
        d: &cf - &orig,
        original: orig,
        counterfactual: cf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiomarkerShift {
    pub channel: String,
    pub mean_d: f64,
    /// Mean shift as a percentage of the mean original weighted abundance.
    pub percent_change: Option<f64>,
    pub test: TestResult,
    pub adjusted_p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClusterOutcome {
    Tested { biomarkers: Vec<BiomarkerShift> },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterShift {
    pub cluster: usize,
    pub size: usize,
    pub outcome: ClusterOutcome,
}

/// Signed-rank test of each biomarker's shifts against zero within each
/// cluster, BH across biomarkers within the cluster.
pub fn cluster_shift_test(
    shift: &ShiftMatrix,
    assignments: &[usize],
    k: usize,
    q: f64,
    min_size: usize,
) -> Result<Vec<ClusterShift>> {
    if assignments.len() != shift.d.nrows() {
        return Err(AtlasError::Argument("one cluster assignment per query is required".into()));
    }
    let mut out = Vec::with_capacity(k);
    for g in 0..k {
        let rows: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == g).collect();
        if rows.len() < min_size {
            out.push(ClusterShift {
                cluster: g,
                size: rows.len(),
                outcome: ClusterOutcome::Skipped {
                    reason: format!("{} members, fewer than {min_size}", rows.len()),
                },
            });
            continue;
        }
        let mut biomarkers = Vec::with_capacity(shift.channels.len());
        for (c, name) in shift.channels.iter().enumerate() {
            let d: Vec<f64> = rows.iter().map(|&i| shift.d[[i, c]]).collect();
            let base: Vec<f64> = rows.iter().map(|&i| shift.original[[i, c]]).collect();
            let mean_d = crate::linalg::mean(&d);
            let base_mean = crate::linalg::mean(&base);
            biomarkers.push(BiomarkerShift {
                channel: name.clone(),
                mean_d,
                percent_change: (base_mean != 0.0).then(|| 100.0 * mean_d / base_mean),
                test: wilcoxon_signed_rank(&d, Alternative::TwoSided)?,
                adjusted_p: f64::NAN,
                significant: false,
            });
        }
        if !biomarkers.is_empty() {
            let raw: Vec<f64> = biomarkers.iter().map(|b| b.test.p_value).collect();
            let fdr = bh_fdr(&raw, q)?;
            for (b, (adj, rej)) in biomarkers.iter_mut().zip(fdr.adjusted.iter().zip(&fdr.rejected)) {
                b.adjusted_p = *adj;
                b.significant = *rej;
            }
        }
        out.push(ClusterShift {
            cluster: g,
            size: rows.len(),
            outcome: ClusterOutcome::Tested { biomarkers },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pca {
    /// Indices of the input rows and columns that were used.
    pub rows: Vec<usize>,
    pub columns: Vec<usize>,
    /// rows × 2.
    pub scores: Array2<f64>,
    /// columns × 2.
    pub loadings: Array2<f64>,
    /// Fraction of total variance on each component.
    pub explained: [f64; 2],
}

/// PCA of the shift matrix after dropping all-missing columns and then
/// incomplete rows. Columns are centered, not scaled. Each component's
/// largest-magnitude loading is made positive.
pub fn pca_shifts(d: ArrayView2<f64>) -> Result<Pca> {
    let columns: Vec<usize> = (0..d.ncols())
        .filter(|&j| d.column(j).iter().any(|v| v.is_finite()))
        .collect();
    let rows: Vec<usize> = (0..d.nrows())
        .filter(|&i| columns.iter().all(|&j| d[[i, j]].is_finite()))
        .collect();
    if rows.len() < 3 || columns.is_empty() {
        return Err(AtlasError::Degenerate(format!(
            "PCA needs at least 3 complete rows, found {} over {} columns",
            rows.len(),
            columns.len()
        )));
    }
    let x = d.select(Axis(0), &rows).select(Axis(1), &columns);
    let mean = x.mean_axis(Axis(0)).expect("rows present");
    let xc = &x - &mean;
    let cov = xc.t().dot(&xc) / (rows.len() as f64 - 1.0);
    let p = columns.len();
    let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 1e-300) {
        return Err(AtlasError::Degenerate("shift matrix has zero variance".into()));
    }
    let mut loadings = Array2::zeros((p, 2));
    let mut explained = [0.0; 2];
    for (slot, &e) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(e);
        let lead = (0..p).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).expect("p > 0");
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            loadings[[i, slot]] = sign * v[i];
        }
        explained[slot] = eig.eigenvalues[e].max(0.0) / total;
    }
    let scores = xc.dot(&loadings);
    Ok(Pca {
        rows,
        columns,
        scores,
        loadings,
        explained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Association {
    pub channel: String,
    /// Pearson r with PC1 and PC2; `None` where undefined.
    pub r: [Option<f64>; 2],
}

/// Correlation of each baseline channel with the first two PCA scores.
pub fn baseline_association(baseline: ArrayView2<f64>, coords: ArrayView2<f64>, channels: &[String]) -> Result<Vec<Association>> {
    if baseline.nrows() != coords.nrows() || coords.ncols() < 2 || channels.len() != baseline.ncols() {
        return Err(AtlasError::Argument("baseline table and coordinates are not aligned".into()));
    }
    let pcs: Vec<Vec<f64>> = (0..2).map(|k| coords.column(k).to_vec()).collect();
    Ok(channels
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let col = baseline.column(c).to_vec();
            Association {
                channel: name.clone(),
                r: [pearson(&col, &pcs[0]).ok(), pearson(&col, &pcs[1]).ok()],
            }
        })
        .collect())
}

/// Everything a counterfactual report needs, computed in one pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualReport {
    pub run: CounterfactualRun,
    pub composition: Option<CompositionReport>,
    pub clusters: ClusterModel,
    pub prototypes: Vec<Vec<String>>,
    pub shift: ShiftMatrix,
    pub cluster_tests: Vec<ClusterShift>,
    pub pca: Option<Pca>,
    pub association: Option<Vec<Association>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub k: usize,
    pub clusters: usize,
    pub restarts: usize,
    pub prototypes: usize,
    pub min_cluster_size: usize,
    pub q: f64,
    pub seed: u64,
    pub label_column: Option<String>,
    pub composition_test: CompositionTest,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
            clusters: DEFAULT_CLUSTERS,
            restarts: DEFAULT_RESTARTS,
            prototypes: PROTOTYPES_PER_CLUSTER,
            min_cluster_size: MIN_CLUSTER_SIZE,
            q: DEFAULT_Q,
            seed: 0,
            label_column: None,
            composition_test: CompositionTest::RankSum,
        }
    }
}

/// End-to-end analysis. `baseline` holds the queries' own mIF patch means,
/// when known.
pub fn analyze(
    index: &EmbeddingIndex,
    query_ids: &[String],
    query_he: ArrayView2<f64>,
    control_txt: &[f64],
    cf_txt: &[f64],
    baseline: Option<ArrayView2<f64>>,
    cfg: &AnalysisConfig,
) -> Result<CounterfactualReport> {
    let run = run_pair(index, query_ids, query_he, control_txt, cf_txt, cfg.alpha, cfg.k)?;
    let composition = match &cfg.label_column {
        Some(col) => {
            let labels = index.label_column(col)?;
            let cats: Vec<String> = labels
                .iter()
                .flatten()
                .cloned()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            Some(composition_shift_with(&run, labels, col, &cats, cfg.composition_test, cfg.q)?)
        }
        None => None,
    };
    let clusters = kmeans(query_he, cfg.clusters.min(query_ids.len()), cfg.seed, cfg.restarts)?;
    let prototypes = select_prototypes(query_he, &clusters, cfg.prototypes)
        .into_iter()
        .map(|ids| ids.into_iter().map(|i| query_ids[i].clone()).collect())
        .collect();
    let shift = shift_matrix(&run, index)?;
    let cluster_tests = cluster_shift_test(&shift, &clusters.assignments, clusters.k, cfg.q, cfg.min_cluster_size)?;
    let pca = pca_shifts(shift.d.view()).ok();
    let association = match (&pca, baseline) {
        (Some(p), Some(b)) => {
            let rows = b.select(Axis(0), &p.rows);
            Some(baseline_association(rows.view(), p.scores.view(), index.channels())?)
        }
        _ => None,
    };
    Ok(CounterfactualReport {
        run,
        composition,
        clusters,
        prototypes,
        shift,
        cluster_tests,
        pca,
        association,
    })
}

/// Count of significant findings across every tested cluster.
pub fn significant_count(tests: &[ClusterShift]) -> (usize, usize) {
    let mut sig = 0;
    let mut total = 0;
    for t in tests {
        if let ClusterOutcome::Tested { biomarkers } = &t.outcome {
            total += biomarkers.len();
            sig += biomarkers.iter().filter(|b| b.significant).count();
        }
    }
    (sig, total)
}

/// Per-cluster view keyed by channel, convenient for reports.
pub fn shift_table(tests: &[ClusterShift]) -> BTreeMap<(usize, String), &BiomarkerShift> {
    let mut out = BTreeMap::new();
    for t in tests {
        if let ClusterOutcome::Tested { biomarkers } = &t.outcome {
            for b in biomarkers {
                out.insert((t.cluster, b.channel.clone()), b);
            }
        }
    }
    out
}
