//! Request handling over immutable galleries. Everything here is a pure
//! function of the loaded snapshots and the request, apart from the run
//! cache, which only memoizes deterministic results under a content-derived
//! id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use atlas_core::counterfactual::planted::{planted_cohort, PlantedConfig};
use atlas_core::counterfactual::{analyze, AnalysisConfig, CompositionTest, CounterfactualReport, DEFAULT_RESTARTS, PROTOTYPES_PER_CLUSTER};
use atlas_core::ingest::{ClinicalMetadata, Modality, SyntheticProvider};
use atlas_core::retrieval::{encode_index, load_index, EmbeddingIndex, FusionQuery, RankStatus, RankedList};
use atlas_core::textgen::perturb_metadata;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Defaults, ServiceConfig, Source};
use crate::error::{Result, ServiceError};
use crate::report::{composition_rows, fmt_p, fmt_value, heatmap, HeatRow};
use crate::workspace::{load_heads, project, rows_by_id, DataDir, TextEncoder};

/// Metadata fields a request may edit.
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

#[derive(Debug, Clone)]
pub struct Gallery {
    pub name: String,
    pub index: EmbeddingIndex,
    pub crc32: u32,
}

/// H&E query patches in the shared space, with their clinical records.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub ids: Vec<String>,
    pub he: Array2<f64>,
    pub slices: Vec<String>,
    pub records: BTreeMap<String, Option<ClinicalMetadata>>,
    /// Each query's own mIF patch means, when known.
    pub baseline: Option<Array2<f64>>,
    lookup: HashMap<String, usize>,
}

impl QuerySet {
    pub fn new(
        ids: Vec<String>,
        he: Array2<f64>,
        slices: Vec<String>,
        records: BTreeMap<String, Option<ClinicalMetadata>>,
        baseline: Option<Array2<f64>>,
    ) -> Self {
        let lookup = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        QuerySet {
            ids,
            he,
            slices,
            records,
            baseline,
            lookup,
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn metadata(&self, i: usize) -> Option<&ClinicalMetadata> {
        self.records.get(&self.slices[i]).and_then(|m| m.as_ref())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StoredRun {
    pub id: String,
    pub gallery: String,
    pub query_ids: Vec<String>,
    pub report: CounterfactualReport,
}

#[derive(Debug)]
pub struct Engine {
    pub galleries: Vec<Gallery>,
    pub queries: QuerySet,
    pub text: TextEncoder,
    pub defaults: Defaults,
    pub thumbnails: Option<PathBuf>,
    runs: RwLock<BTreeMap<String, Arc<StoredRun>>>,
}

fn hex(crc: u32) -> String {
    format!("{crc:08x}")
}

impl Engine {
    pub fn new(galleries: Vec<Gallery>, queries: QuerySet, text: TextEncoder, defaults: Defaults) -> Result<Self> {
        if galleries.is_empty() {
            return Err(ServiceError::Config("no galleries".into()));
        }
        let dim = galleries[0].index.dim();
        if galleries.iter().any(|g| g.index.dim() != dim) || (queries.he.nrows() > 0 && queries.he.ncols() != dim) {
            return Err(ServiceError::Config("galleries and queries must share one embedding space".into()));
        }
        Ok(Engine {
            galleries,
            queries,
            text,
            defaults,
            thumbnails: None,
            runs: RwLock::new(BTreeMap::new()),
        })
    }

    /// Loads every snapshot named by the configuration. A snapshot whose
    /// CRC-32 differs from the configured value is refused.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self> {
        match &cfg.source {
            Source::Planted { planted } => Self::planted(planted, cfg.defaults.clone()),
            Source::Files {
                data,
                checkpoint,
                galleries,
                thumbnails,
            } => {
                let mut loaded = Vec::with_capacity(galleries.len());
                for spec in galleries {
                    let bytes = std::fs::read(&spec.path).map_err(|e| ServiceError::io(&spec.path, e))?;
                    let crc = crc32fast::hash(&bytes);
                    if let Some(expected) = &spec.crc32 {
                        if !expected.eq_ignore_ascii_case(&hex(crc)) {
                            return Err(ServiceError::Checksum {
                                path: spec.path.clone(),
                                expected: expected.clone(),
                                found: hex(crc),
                            });
                        }
                    }
                    let index = load_index(&spec.path)?;
                    loaded.push(Gallery {
                        name: spec.name.clone(),
                        index,
                        crc32: crc,
                    });
                }
                let data = DataDir::open(data)?;
                let heads = checkpoint.as_deref().map(load_heads).transpose()?;
                let queries = file_queries(&data, heads.as_ref())?;
                let synth = data.synth.clone().ok_or_else(|| {
                    ServiceError::Config(format!("{} has no text encoder description", data.root.display()))
                })?;
                let text = TextEncoder::Synthetic {
                    provider: SyntheticProvider::new(synth)?,
                    heads: heads.map(Box::new),
                };
                let mut engine = Self::new(loaded, queries, text, cfg.defaults.clone())?;
                engine.thumbnails = thumbnails.clone();
                Ok(engine)
            }
        }
    }

    pub fn planted(cfg: &PlantedConfig, defaults: Defaults) -> Result<Self> {
        let cohort = planted_cohort(cfg)?;
        let crc = crc32fast::hash(&encode_index(&cohort.index));
        let slices: Vec<String> = cohort.query_cluster.iter().map(|k| format!("c{k}")).collect();
        let mut meta = ClinicalMetadata::new("lung", "adenocarcinoma", "tumor");
        meta.t_stage = Some("T2".into());
        meta.n_stage = Some("N0".into());
        meta.m_stage = Some("M0".into());
        let records = slices.iter().map(|s| (s.clone(), Some(meta.clone()))).collect();
        let queries = QuerySet::new(cohort.query_ids.clone(), cohort.query_he.clone(), slices, records, Some(cohort.baseline.clone()));
        let gallery = Gallery {
            name: "planted".into(),
            index: cohort.index,
            crc32: crc,
        };
        Self::new(vec![gallery], queries, TextEncoder::Planted { morph_dim: cfg.morph_dim }, defaults)
    }

    pub fn rows(&self) -> usize {
        self.galleries.iter().map(|g| g.index.len()).sum()
    }

    pub fn gallery(&self, name: Option<&str>) -> Result<&Gallery> {
        match name {
            None => Ok(&self.galleries[0]),
            Some(n) => self
                .galleries
                .iter()
                .find(|g| g.name == n)
                .ok_or_else(|| ServiceError::NotFound(format!("gallery {n:?}"))),
        }
    }

    fn check_k(&self, k: Option<usize>, default: usize) -> Result<usize> {
        let k = k.unwrap_or(default);
        if k == 0 || k > self.defaults.max_k {
            return Err(ServiceError::BadRequest(format!("k must be in 1..={}", self.defaults.max_k)));
        }
        Ok(k)
    }

    fn check_alpha(alpha: Option<f64>, default: f64) -> Result<f64> {
        let a = alpha.unwrap_or(default);
        if !(0.0..=1.0).contains(&a) {
            return Err(ServiceError::BadRequest(format!("alpha must lie in [0, 1], got {a}")));
        }
        Ok(a)
    }

    fn check_edits(edits: &BTreeMap<String, String>) -> Result<()> {
        for f in edits.keys() {
            if !EDITABLE_FIELDS.contains(&f.as_str()) {
                return Err(ServiceError::BadRequest(format!("unknown metadata field {f:?}")));
            }
        }
        Ok(())
    }

    /// Text embedding of a query's record after `edits`.
    fn text_for(&self, meta: Option<&ClinicalMetadata>, edits: &BTreeMap<String, String>) -> Result<(Vec<f64>, String)> {
        Self::check_edits(edits)?;
        if edits.is_empty() {
            return Ok((self.text.encode(meta)?, TextEncoder::clinical_text(meta)));
        }
        let base = meta.ok_or_else(|| ServiceError::BadRequest("query has no clinical record to edit".into()))?;
        let (edited, text) = perturb_metadata(base, edits)?;
        Ok((self.text.encode(Some(&edited))?, text))
    }

    pub fn galleries_view(&self) -> GalleriesResponse {
        GalleriesResponse {
            galleries: self
                .galleries
                .iter()
                .enumerate()
                .map(|(i, g)| GalleryInfo {
                    name: g.name.clone(),
                    modality: g.index.modality().name().to_string(),
                    rows: g.index.len(),
                    dim: g.index.dim(),
                    channels: g.index.channels().to_vec(),
                    label_columns: g.index.labels().keys().cloned().collect(),
                    crc32: hex(g.crc32),
                    default: i == 0,
                })
                .collect(),
            queries: self
                .queries
                .ids
                .iter()
                .zip(&self.queries.slices)
                .map(|(id, s)| QueryPatch {
                    id: id.clone(),
                    slice: s.clone(),
                })
                .collect(),
            editable_fields: EDITABLE_FIELDS.iter().map(|s| s.to_string()).collect(),
            defaults: self.defaults.clone(),
        }
    }

    pub fn patch(&self, id: &str) -> Result<PatchView> {
        if let Some(i) = self.queries.position(id) {
            return Ok(PatchView {
                id: id.into(),
                kind: "query",
                gallery: None,
                region: Some(self.queries.slices[i].clone()),
                labels: BTreeMap::new(),
                channels: self.galleries[0].index.channels().to_vec(),
                abundance: self.queries.baseline.as_ref().map(|b| b.row(i).to_vec()),
                metadata: self.queries.metadata(i).cloned(),
                clinical_text: TextEncoder::clinical_text(self.queries.metadata(i)),
                thumbnail: format!("/v1/patches/{id}/thumbnail"),
            });
        }
        for g in &self.galleries {
            if let Some(r) = g.index.position(id) {
                return Ok(PatchView {
                    id: id.into(),
                    kind: "gallery",
                    gallery: Some(g.name.clone()),
                    region: g.index.regions().map(|x| x[r].clone()),
                    labels: labels_of(&g.index, r),
                    channels: g.index.channels().to_vec(),
                    abundance: g.index.abundance().map(|a| a.row(r).to_vec()),
                    metadata: None,
                    clinical_text: String::new(),
                    thumbnail: format!("/v1/patches/{id}/thumbnail"),
                });
            }
        }
        Err(ServiceError::NotFound(format!("patch {id:?}")))
    }

    /// PNG thumbnail: a file from the thumbnail directory when present,
    /// otherwise a swatch rendered from the patch's abundance row.
    pub fn thumbnail(&self, id: &str) -> Result<Vec<u8>> {
        if let Some(dir) = &self.thumbnails {
            let safe = !id.contains(['/', '\\']) && !id.starts_with('.');
            let path = dir.join(format!("{id}.png"));
            if safe && path.is_file() {
                return std::fs::read(&path).map_err(|e| ServiceError::io(&path, e));
            }
        }
        let view = self.patch(id)?;
        let row = view
            .abundance
            .ok_or_else(|| ServiceError::NotFound(format!("no thumbnail source for {id:?}")))?;
        let scale = self.galleries[0]
            .index
            .abundance()
            .map(|a| a.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max))
            .unwrap_or(255.0);
        crate::thumbs::swatch(&row, scale)
    }

    pub fn query(&self, req: &QueryRequest) -> Result<QueryResponse> {
        let g = self.gallery(req.gallery.as_deref())?;
        let k = self.check_k(req.k, self.defaults.inference_k)?;
        let (vector, alpha, region, mode) = match (&req.patch_id, &req.embedding) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(ServiceError::BadRequest("give exactly one of patch_id and embedding".into()))
            }
            (None, Some(e)) => {
                if !req.edits.is_empty() {
                    return Err(ServiceError::BadRequest("edits need a query patch".into()));
                }
                (e.clone(), None, None, "embedding")
            }
            (Some(id), None) => {
                if let Some(i) = self.queries.position(id) {
                    let alpha = Self::check_alpha(req.alpha, self.defaults.inference_alpha)?;
                    let (txt, _) = self.text_for(self.queries.metadata(i), &req.edits)?;
                    let fq = FusionQuery::new(self.queries.he.row(i).to_vec(), txt, alpha)?;
                    (fq.vector(false)?, Some(alpha), Some(self.queries.slices[i].clone()), "fused")
                } else if let Some(r) = g.index.position(id) {
                    if !req.edits.is_empty() {
                        return Err(ServiceError::BadRequest("gallery patches carry no clinical text to edit".into()));
                    }
                    let v = g.index.row(r).iter().map(|x| f64::from(*x)).collect();
                    (v, None, g.index.regions().map(|x| x[r].clone()), "gallery")
                } else {
                    return Err(ServiceError::NotFound(format!("patch {id:?}")));
                }
            }
        };
        let ranked = match (req.exclude_own_slice, &region, g.index.regions()) {
            (true, Some(own), Some(regions)) => g.index.query_filtered(&vector, k, |j| regions[j] != *own)?,
            (true, _, _) => return Err(ServiceError::BadRequest("exclude_own_slice needs a query patch and a gallery with slices".into())),
            _ => g.index.query(&vector, k)?,
        };
        Ok(QueryResponse {
            gallery: g.name.clone(),
            query: QueryEcho {
                patch_id: req.patch_id.clone(),
                mode,
                alpha,
                k,
                edits: req.edits.clone(),
                exclude_own_slice: req.exclude_own_slice,
            },
            channels: g.index.channels().to_vec(),
            status: ranked.status,
            results: hits(&g.index, &ranked),
        })
    }

    fn resolve_queries(&self, req: &CounterfactualRequest) -> Result<Vec<usize>> {
        let mut rows: Vec<usize> = Vec::new();
        for id in &req.query_ids {
            rows.push(
                self.queries
                    .position(id)
                    .ok_or_else(|| ServiceError::NotFound(format!("query patch {id:?}")))?,
            );
        }
        if let Some(s) = &req.slice_id {
            let before = rows.len();
            rows.extend((0..self.queries.ids.len()).filter(|&i| self.queries.slices[i] == *s));
            if rows.len() == before {
                return Err(ServiceError::NotFound(format!("no query patches in slice {s:?}")));
            }
        }
        if req.query_ids.is_empty() && req.slice_id.is_none() {
            rows = (0..self.queries.ids.len()).collect();
        }
        let mut seen = BTreeSet::new();
        rows.retain(|i| seen.insert(*i));
        if rows.is_empty() {
            return Err(ServiceError::BadRequest("no query patches".into()));
        }
        Ok(rows)
    }

    fn normalize(&self, req: &CounterfactualRequest) -> Result<(NormalizedRun, Vec<usize>)> {
        let g = self.gallery(req.gallery.as_deref())?;
        let rows = self.resolve_queries(req)?;
        Self::check_edits(&req.edits)?;
        let d = &self.defaults;
        let label_column = match &req.label_column {
            Some(c) if c.is_empty() => None,
            Some(c) => Some(c.clone()),
            None => d.label_column.clone().filter(|c| g.index.labels().contains_key(c)),
        };
        let clusters = req.clusters.unwrap_or(d.clusters);
        if clusters == 0 {
            return Err(ServiceError::BadRequest("clusters must be positive".into()));
        }
        Ok((
            NormalizedRun {
                gallery: g.name.clone(),
                query_ids: rows.iter().map(|&i| self.queries.ids[i].clone()).collect(),
                edits: req.edits.clone(),
                alpha: Self::check_alpha(req.alpha, d.counterfactual_alpha)?,
                k: self.check_k(req.k, d.counterfactual_k)?,
                clusters,
                seed: req.seed.unwrap_or(d.seed),
                label_column,
                composition_test: req.composition_test.unwrap_or(d.composition_test),
            },
            rows,
        ))
    }

    /// Runs (or recalls) a counterfactual comparison. All queries must share
    /// one clinical record, since one text embedding is used per condition.
    pub fn counterfactual(&self, req: &CounterfactualRequest) -> Result<CounterfactualResponse> {
        let (norm, rows) = self.normalize(req)?;
        let key = serde_json::to_vec(&norm).expect("plain data serializes");
        let id = hex(crc32fast::hash(&key));
        let first = self.queries.metadata(rows[0]);
        if rows.iter().any(|&i| self.queries.metadata(i) != first) {
            return Err(ServiceError::BadRequest(
                "queries span different clinical records; pick one slice or record".into(),
            ));
        }
        let (control, control_text) = self.text_for(first, &BTreeMap::new())?;
        let (cf, cf_text) = self.text_for(first, &norm.edits)?;
        let cached = self.runs.read().expect("run cache lock").get(&id).cloned();
        let stored = match cached {
            Some(s) => s,
            None => {
                let g = self.gallery(Some(&norm.gallery))?;
                let he = self.queries.he.select(Axis(0), &rows);
                let baseline = self.queries.baseline.as_ref().map(|b| b.select(Axis(0), &rows));
                let cfg = AnalysisConfig {
                    alpha: norm.alpha,
                    k: norm.k,
                    clusters: norm.clusters,
                    restarts: DEFAULT_RESTARTS,
                    prototypes: PROTOTYPES_PER_CLUSTER,
                    min_cluster_size: self.defaults.min_cluster_size,
                    q: self.defaults.q,
                    seed: norm.seed,
                    label_column: norm.label_column.clone(),
                    composition_test: norm.composition_test,
                };
                let report = analyze(&g.index, &norm.query_ids, he.view(), &control, &cf, baseline.as_ref().map(|b| b.view()), &cfg)?;
                let s = Arc::new(StoredRun {
                    id: id.clone(),
                    gallery: norm.gallery.clone(),
                    query_ids: norm.query_ids.clone(),
                    report,
                });
                self.runs.write().expect("run cache lock").entry(id.clone()).or_insert(s).clone()
            }
        };
        let g = self.gallery(Some(&stored.gallery))?;
        Ok(response_for(&stored, g, &norm, control_text, cf_text))
    }

    pub fn run(&self, id: &str) -> Result<Arc<StoredRun>> {
        self.runs
            .read()
            .expect("run cache lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("run {id:?}; POST /v1/counterfactual first")))
    }

    pub fn clusters(&self, id: &str) -> Result<ClustersResponse> {
        let run = self.run(id)?;
        let r = &run.report;
        let pca = r.pca.as_ref().map(|p| PcaView {
            explained: p.explained.map(fmt_value),
            points: p
                .rows
                .iter()
                .enumerate()
                .map(|(row, &i)| PcaPoint {
                    query_id: r.shift.query_ids[i].clone(),
                    cluster: r.clusters.assignments[i],
                    pc1: fmt_value(p.scores[[row, 0]]),
                    pc2: fmt_value(p.scores[[row, 1]]),
                })
                .collect(),
            loadings: p
                .columns
                .iter()
                .enumerate()
                .map(|(row, &j)| Loading {
                    channel: r.shift.channels[j].clone(),
                    pc1: fmt_value(p.loadings[[row, 0]]),
                    pc2: fmt_value(p.loadings[[row, 1]]),
                })
                .collect(),
        });
        Ok(ClustersResponse {
            run: run.id.clone(),
            k: r.clusters.k,
            sizes: r.clusters.sizes(),
            assignments: r
                .run
                .query_ids
                .iter()
                .zip(&r.clusters.assignments)
                .map(|(q, c)| Assignment {
                    query_id: q.clone(),
                    cluster: *c,
                })
                .collect(),
            channels: r.shift.channels.clone(),
            heatmap: heatmap(r),
            pca,
        })
    }

    pub fn prototypes(&self, id: &str) -> Result<PrototypesResponse> {
        let run = self.run(id)?;
        let sizes = run.report.clusters.sizes();
        Ok(PrototypesResponse {
            run: run.id.clone(),
            clusters: run
                .report
                .prototypes
                .iter()
                .enumerate()
                .map(|(c, ids)| PrototypeCluster {
                    cluster: c,
                    size: sizes[c],
                    prototypes: ids.clone(),
                })
                .collect(),
        })
    }
}

fn file_queries(data: &DataDir, heads: Option<&atlas_core::align::TriHeads>) -> Result<QuerySet> {
    let raw = data.embeddings(Modality::He)?;
    let slice_of = data.slice_of();
    let ids: Vec<String> = raw
        .ids
        .iter()
        .filter(|id| slice_of.contains_key(id.as_str()))
        .cloned()
        .collect();
    let rows = rows_by_id(&raw, &ids)?;
    let he = project(heads, &raw)?.select(Axis(0), &rows);
    let slices = ids.iter().map(|id| slice_of[id.as_str()].to_string()).collect();
    let baseline = data.abundance(&ids)?;
    Ok(QuerySet::new(ids, he, slices, data.metadata_of_slice(), Some(baseline)))
}

fn labels_of(index: &EmbeddingIndex, row: usize) -> BTreeMap<String, Option<String>> {
    index
        .labels()
        .iter()
        .map(|(k, col)| (k.clone(), col[row].clone()))
        .collect()
}

fn hits(index: &EmbeddingIndex, ranked: &RankedList) -> Vec<Hit> {
    ranked
        .indices
        .iter()
        .zip(&ranked.ids)
        .zip(&ranked.scores)
        .enumerate()
        .map(|(rank, ((&j, id), &score))| Hit {
            rank: rank + 1,
            id: id.clone(),
            score,
            region: index.regions().map(|r| r[j].clone()),
            labels: labels_of(index, j),
            abundance: index.abundance().map(|a| a.row(j).to_vec()),
        })
        .collect()
}

fn response_for(run: &StoredRun, g: &Gallery, norm: &NormalizedRun, control_text: String, cf_text: String) -> CounterfactualResponse {
    let r = &run.report;
    let queries = r
        .run
        .query_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let o = &r.run.original[i];
            let c = &r.run.counterfactual[i];
            QueryPair {
                query_id: id.clone(),
                cluster: r.clusters.assignments[i],
                identical: o.ids == c.ids,
                original: hits(&g.index, o),
                counterfactual: hits(&g.index, c),
            }
        })
        .collect();
    let n = r.shift.d.nrows().max(1) as f64;
    let strip = r
        .shift
        .channels
        .iter()
        .enumerate()
        .map(|(j, ch)| {
            let col = r.shift.d.column(j);
            let mean_d = col.sum() / n;
            let orig = r.shift.original.column(j).sum() / n;
            ShiftCell {
                channel: ch.clone(),
                mean_d: fmt_value(mean_d),
                percent_change: if orig != 0.0 { fmt_value(100.0 * mean_d / orig) } else { "NA".into() },
                min_adjusted_p: min_adjusted_p(&r.cluster_tests, ch),
            }
        })
        .collect();
    let composition = r.composition.as_ref().map(|c| CompositionView {
        column: c.column.clone(),
        test: c.test,
        rows: composition_rows(r)
            .into_iter()
            .map(|v| CompositionBar {
                category: v[0].clone(),
                original: v[1].clone(),
                counterfactual: v[2].clone(),
                shift: v[3].clone(),
                adjusted_p: v[6].clone(),
                significant: v[7] == "true",
            })
            .collect(),
    });
    CounterfactualResponse {
        run: run.id.clone(),
        gallery: run.gallery.clone(),
        alpha: norm.alpha,
        k: norm.k,
        edits: norm.edits.clone(),
        control_text,
        counterfactual_text: cf_text,
        queries,
        composition,
        shift: strip,
        clusters: r.clusters.sizes(),
    }
}

fn min_adjusted_p(tests: &[atlas_core::counterfactual::ClusterShift], channel: &str) -> String {
    let best = atlas_core::counterfactual::shift_table(tests)
        .iter()
        .filter(|((_, ch), _)| ch == channel)
        .map(|(_, b)| b.adjusted_p)
        .filter(|p| p.is_finite())
        .fold(f64::INFINITY, f64::min);
    fmt_p(best)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub gallery: Option<String>,
    #[serde(default)]
    pub patch_id: Option<String>,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub edits: BTreeMap<String, String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub exclude_own_slice: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEcho {
    pub patch_id: Option<String>,
    /// `fused` (query patch + clinical text), `gallery` (a gallery row as
    /// its own query) or `embedding` (raw vector).
    pub mode: &'static str,
    pub alpha: Option<f64>,
    pub k: usize,
    pub edits: BTreeMap<String, String>,
    pub exclude_own_slice: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub region: Option<String>,
    pub labels: BTreeMap<String, Option<String>>,
    pub abundance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResponse {
    pub gallery: String,
    pub query: QueryEcho,
    pub channels: Vec<String>,
    pub status: RankStatus,
    pub results: Vec<Hit>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    #[serde(default)]
    pub gallery: Option<String>,
    #[serde(default)]
    pub query_ids: Vec<String>,
    #[serde(default)]
    pub slice_id: Option<String>,
    #[serde(default)]
    pub edits: BTreeMap<String, String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub clusters: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Empty string disables the composition test.
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub composition_test: Option<CompositionTest>,
}

/// A request with every default filled in; its serialization keys the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct NormalizedRun {
    gallery: String,
    query_ids: Vec<String>,
    edits: BTreeMap<String, String>,
    alpha: f64,
    k: usize,
    clusters: usize,
    seed: u64,
    label_column: Option<String>,
    composition_test: CompositionTest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPair {
    pub query_id: String,
    pub cluster: usize,
    pub identical: bool,
    pub original: Vec<Hit>,
    pub counterfactual: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionBar {
    pub category: String,
    pub original: String,
    pub counterfactual: String,
    pub shift: String,
    pub adjusted_p: String,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionView {
    pub column: String,
    pub test: CompositionTest,
    /// One row per category, then `unlabeled`.
    pub rows: Vec<CompositionBar>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftCell {
    pub channel: String,
    pub mean_d: String,
    pub percent_change: String,
    /// Smallest adjusted p for the channel over tested clusters.
    pub min_adjusted_p: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualResponse {
    pub run: String,
    pub gallery: String,
    pub alpha: f64,
    pub k: usize,
    pub edits: BTreeMap<String, String>,
    pub control_text: String,
    pub counterfactual_text: String,
    pub queries: Vec<QueryPair>,
    pub composition: Option<CompositionView>,
    pub shift: Vec<ShiftCell>,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalleryInfo {
    pub name: String,
    pub modality: String,
    pub rows: usize,
    pub dim: usize,
    pub channels: Vec<String>,
    pub label_columns: Vec<String>,
    pub crc32: String,
    pub default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPatch {
    pub id: String,
    pub slice: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalleriesResponse {
    pub galleries: Vec<GalleryInfo>,
    pub queries: Vec<QueryPatch>,
    pub editable_fields: Vec<String>,
    pub defaults: Defaults,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchView {
    pub id: String,
    pub kind: &'static str,
    pub gallery: Option<String>,
    pub region: Option<String>,
    pub labels: BTreeMap<String, Option<String>>,
    pub channels: Vec<String>,
    pub abundance: Option<Vec<f64>>,
    pub metadata: Option<ClinicalMetadata>,
    pub clinical_text: String,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub query_id: String,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaPoint {
    pub query_id: String,
    pub cluster: usize,
    pub pc1: String,
    pub pc2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Loading {
    pub channel: String,
    pub pc1: String,
    pub pc2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaView {
    pub explained: [String; 2],
    pub points: Vec<PcaPoint>,
    pub loadings: Vec<Loading>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClustersResponse {
    pub run: String,
    pub k: usize,
    pub sizes: Vec<usize>,
    pub assignments: Vec<Assignment>,
    pub channels: Vec<String>,
    pub heatmap: Vec<HeatRow>,
    pub pca: Option<PcaView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrototypeCluster {
    pub cluster: usize,
    pub size: usize,
    pub prototypes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrototypesResponse {
    pub run: String,
    pub clusters: Vec<PrototypeCluster>,
}

/// Opens a file-backed engine without a config file (CLI use).
pub fn open_files(data: &Path, checkpoint: Option<&Path>, galleries: &[(String, PathBuf)], defaults: Defaults) -> Result<Engine> {
    let cfg = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        cors_origins: Vec::new(),
        defaults,
        source: Source::Files {
            data: data.to_path_buf(),
            checkpoint: checkpoint.map(Path::to_path_buf),
            galleries: galleries
                .iter()
                .map(|(name, path)| crate::config::GallerySpec {
                    name: name.clone(),
                    path: path.clone(),
                    crc32: None,
                })
                .collect(),
            thumbnails: None,
        },
    };
    Engine::from_config(&cfg)
}
