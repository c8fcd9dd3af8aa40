//! `atlas` subcommands.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use atlas_core::align::{train, AlignConfig, TrainData};
use atlas_core::counterfactual::planted::PlantedConfig;
use atlas_core::downstream::{
    cross_validate_mil, fuse_concat, km_logrank, make_folds, median_split, probe_grid, FoldOutcome, GroupLevel,
    MilConfig, Targets, DEFAULT_FOLDS, PROBE_GRID,
};
use atlas_core::ingest::{
    load_manifest, save_manifest, split_patients, synth_cohort, ClinicalMetadata, Dataset, Modality, PatchRecord,
    SliceRecord, SurvivalStatus, SynthConfig,
};
use atlas_core::preprocess::{generate_patches, normalize_image, MultiplexImage, NormalizeConfig, PatchConfig, PatchCoord};
use atlas_core::retrieval::{save_index, six_direction_recall};
use atlas_core::textgen::{
    assign_pattern, parse_edits, patch_channel_mean, spatial_metrics, summarize_region, BiomarkerSummary, ChannelSummary,
    SpatialPattern, Template,
};
use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array2, Axis};
use serde::Serialize;

use crate::config::{Defaults, ServiceConfig};
use crate::engine::{open_files, CounterfactualRequest, CounterfactualResponse, Engine, QueryRequest};
use crate::report::{write_csv, write_report};
use crate::workspace::{
    create_dir, load_heads, project, read_text, rows_by_id, write_cohort, write_text, DataDir, CHECKPOINT, HOLDOUT,
    LOSS_TRACE,
};

#[derive(Debug, Parser)]
#[command(name = "atlas", version, about = "Tri-modal tissue atlas: alignment, retrieval and counterfactual analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and print a summary.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic cohort (manifest, embeddings, text encoder description).
    Synth {
        #[arg(long, default_value_t = 64)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patches_per_slice: usize,
        #[arg(long, default_value_t = 1)]
        slices_per_patient: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
    /// Normalize channel rasters and tile them into patches.
    Preprocess {
        /// One sub-directory per slice holding `mask.png` and one PNG per channel.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        patch: usize,
        #[arg(long)]
        jitter: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate patch descriptions from preprocessed patches and slice metadata.
    Textgen {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the projection heads.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML alignment config; library defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of patients held out from training (listed in holdout.txt).
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// Build, query and evaluate index snapshots.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Cross-validated linear probe with C selection.
    Probe {
        #[command(flatten)]
        model: ModelArgs,
        /// Metadata column to predict.
        #[arg(long, default_value = "t_stage")]
        label: String,
        /// he, mif or fused.
        #[arg(long, default_value = "fused")]
        features: String,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention-MIL slice-level prediction.
    Mil {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = ["response", "survival"])]
        task: String,
        #[arg(long, default_value = "he")]
        features: String,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Original versus counterfactual retrieval for a set of query patches.
    Counterfactual {
        #[command(flatten)]
        source: SourceArgs,
        /// Comma-separated ids, `@file` (one id per line), `slice:ID` or `all`.
        #[arg(long, default_value = "all")]
        queries: String,
        /// field=value[,field=value]; empty for the null edit.
        #[arg(long, default_value = "")]
        edit: String,
        #[arg(long, default_value_t = atlas_core::counterfactual::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = atlas_core::counterfactual::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = atlas_core::counterfactual::DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label column for the composition test; empty to skip.
        #[arg(long, default_value = "n_stage")]
        label_column: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Project one modality and write an `.hki` snapshot.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "mif")]
        modality: String,
        /// Index only held-out patients from the checkpoint's holdout.txt.
        #[arg(long)]
        holdout_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query a snapshot with a patch and print the ranking as CSV.
    Query {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        patch: String,
        #[arg(long, default_value = "")]
        edit: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        exclude_own_slice: bool,
    },
    /// Six-direction Recall@K on held-out (or all) patients, as CSV.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "1,5,10,50")]
        ks: String,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file or directory; raw embeddings when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Use the built-in planted cohort instead of files.
    #[arg(long, conflicts_with_all = ["index", "data"])]
    pub planted: bool,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl SourceArgs {
    fn engine(&self) -> anyhow::Result<Engine> {
        if self.planted {
            return Ok(Engine::planted(&PlantedConfig::default(), Defaults::default())?);
        }
        let (Some(index), Some(data)) = (&self.index, &self.data) else {
            bail!("give --index and --data, or --planted");
        };
        let name = index
            .file_stem()
            .map_or_else(|| "gallery".to_string(), |s| s.to_string_lossy().into_owned());
        Ok(open_files(data, self.checkpoint.as_deref(), &[(name, index.clone())], Defaults::default())?)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { manifest } => ingest(&manifest),
        Command::Synth {
            patients,
            seed,
            out,
            patches_per_slice,
            slices_per_patient,
            noise,
        } => {
            let cfg = SynthConfig {
                n_patients: patients,
                seed,
                patches_per_slice,
                slices_per_patient,
                noise_scale: noise,
                ..SynthConfig::default()
            };
            let cohort = synth_cohort(&cfg)?;
            write_cohort(&cohort, &out)?;
            println!(
                "wrote {} slices, {} patches to {}",
                cohort.dataset.slices.len(),
                cohort.dataset.patches.len(),
                out.display()
            );
            Ok(())
        }
        Command::Preprocess {
            input,
            out,
            patch,
            jitter,
            seed,
        } => preprocess(&input, &out, patch, jitter, seed),
        Command::Textgen { patches, metadata, out } => textgen(&patches, &metadata, &out),
        Command::Train {
            data,
            config,
            out,
            holdout,
        } => train_cmd(&data, config.as_deref(), &out, holdout),
        Command::Index { command } => match command {
            IndexCommand::Build {
                model,
                modality,
                holdout_only,
                out,
            } => index_build(&model, &modality, holdout_only, &out),
            IndexCommand::Query {
                source,
                patch,
                edit,
                alpha,
                k,
                exclude_own_slice,
            } => {
                let engine = source.engine()?;
                let resp = engine.query(&QueryRequest {
                    patch_id: Some(patch),
                    edits: parse_edits(&edit)?,
                    alpha,
                    k: Some(k),
                    exclude_own_slice,
                    ..QueryRequest::default()
                })?;
                println!("rank,id,score,region");
                for h in resp.results {
                    println!("{},{},{:.9},{}", h.rank, h.id, h.score, h.region.unwrap_or_default());
                }
                Ok(())
            }
            IndexCommand::Eval { model, ks, all, out } => index_eval(&model, &ks, all, &out),
        },
        Command::Probe {
            model,
            label,
            features,
            folds,
            seed,
            out,
        } => probe(&model, &label, &features, folds, seed, &out),
        Command::Mil {
            model,
            task,
            features,
            folds,
            seed,
            epochs,
            out,
        } => mil(&model, &task, &features, folds, seed, epochs, &out),
        Command::Counterfactual {
            source,
            queries,
            edit,
            alpha,
            k,
            clusters,
            seed,
            label_column,
            out,
        } => {
            let engine = source.engine()?;
            let mut req = CounterfactualRequest {
                edits: parse_edits(&edit)?,
                alpha: Some(alpha),
                k: Some(k),
                clusters: Some(clusters),
                seed: Some(seed),
                label_column: Some(label_column),
                ..CounterfactualRequest::default()
            };
            parse_queries(&queries, &mut req)?;
            let resp = counterfactual_report(&engine, &req, &out)?;
            println!(
                "run {}: {} queries, clusters {:?}, report in {}",
                resp.run,
                resp.queries.len(),
                resp.clusters,
                out.display()
            );
            Ok(())
        }
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(&config)?;
            let addr = cfg.listen_addr()?;
            let engine = Arc::new(Engine::from_config(&cfg)?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(crate::api::serve(engine, addr, &cfg.cors_origins))?;
            Ok(())
        }
    }
}

fn parse_queries(spec: &str, req: &mut CounterfactualRequest) -> anyhow::Result<()> {
    let spec = spec.trim();
    if spec == "all" || spec.is_empty() {
        return Ok(());
    }
    if let Some(slice) = spec.strip_prefix("slice:") {
        req.slice_id = Some(slice.to_string());
        return Ok(());
    }
    let text = match spec.strip_prefix('@') {
        Some(path) => read_text(Path::new(path))?,
        None => spec.replace(',', "\n"),
    };
    req.query_ids = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    Ok(())
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    run: &'a str,
    gallery: &'a str,
    alpha: f64,
    k: usize,
    edits: &'a BTreeMap<String, String>,
    control_text: &'a str,
    counterfactual_text: &'a str,
    queries: usize,
    identical_sets: usize,
    cluster_sizes: &'a [usize],
    pca_explained: Option<[f64; 2]>,
    composition: &'a Option<crate::engine::CompositionView>,
    shift: &'a [crate::engine::ShiftCell],
}

/// Runs a counterfactual request and writes the report bundle.
pub fn counterfactual_report(engine: &Engine, req: &CounterfactualRequest, out: &Path) -> anyhow::Result<CounterfactualResponse> {
    let resp = engine.counterfactual(req)?;
    let run = engine.run(&resp.run)?;
    let summary = ReportSummary {
        run: &resp.run,
        gallery: &resp.gallery,
        alpha: resp.alpha,
        k: resp.k,
        edits: &resp.edits,
        control_text: &resp.control_text,
        counterfactual_text: &resp.counterfactual_text,
        queries: resp.queries.len(),
        identical_sets: resp.queries.iter().filter(|q| q.identical).count(),
        cluster_sizes: &resp.clusters,
        pca_explained: run.report.pca.as_ref().map(|p| p.explained),
        composition: &resp.composition,
        shift: &resp.shift,
    };
    write_report(&run.report, &summary, out)?;
    Ok(resp)
}

fn ingest(manifest: &Path) -> anyhow::Result<()> {
    let ds = load_manifest(manifest)?;
    let with_meta = ds.slices.iter().filter(|s| s.has_metadata()).count();
    #[derive(Serialize)]
    struct Summary {
        slices: usize,
        patches: usize,
        patients: usize,
        slices_with_metadata: usize,
        slices_without_he: usize,
        slices_without_text: usize,
    }
    let s = Summary {
        slices: ds.slices.len(),
        patches: ds.patches.len(),
        patients: ds.patient_ids().len(),
        slices_with_metadata: with_meta,
        slices_without_he: ds.slices.iter().filter(|s| !s.has_he).count(),
        slices_without_text: ds.slices.iter().filter(|s| !s.has_text).count(),
    };
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn read_png16(path: &Path) -> anyhow::Result<Array2<u16>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())?)
}

fn write_png8(path: &Path, plane: &Array2<u8>) -> anyhow::Result<()> {
    let (h, w) = plane.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, plane.iter().copied().collect())
        .ok_or_else(|| anyhow!("plane buffer size mismatch"))?;
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_png8(path: &Path) -> anyhow::Result<Array2<u8>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())?)
}

fn sorted_dirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Channel names for a raw slice directory: `channels.txt` when present,
/// otherwise every PNG except the mask, sorted by name.
fn slice_channels(dir: &Path) -> anyhow::Result<Vec<String>> {
    let listed = dir.join("channels.txt");
    if listed.exists() {
        return Ok(read_text(&listed)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .filter(|n| n != "mask")
        .collect();
    names.sort();
    Ok(names)
}

fn preprocess(input: &Path, out: &Path, patch: usize, jitter: Option<usize>, seed: u64) -> anyhow::Result<()> {
    let cfg = PatchConfig {
        patch,
        jitter,
        ..PatchConfig::default()
    };
    let norm = NormalizeConfig::default();
    for (si, dir) in sorted_dirs(input)?.into_iter().enumerate() {
        let slice = dir_name(&dir);
        let channels = slice_channels(&dir)?;
        if channels.is_empty() {
            bail!("{} has no channel images", dir.display());
        }
        let mask = read_png8(&dir.join("mask.png"))?.mapv(|v| v > 0);
        let planes: Vec<Array2<u16>> = channels
            .iter()
            .map(|c| read_png16(&dir.join(format!("{c}.png"))))
            .collect::<anyhow::Result<_>>()?;
        let image = MultiplexImage::new(planes, mask)?;
        let normalized: Vec<Array2<u8>> = normalize_image(&image, &norm)
            .into_iter()
            .zip(&channels)
            .map(|(p, name)| {
                p.unwrap_or_else(|| {
                    eprintln!("warning: {slice}/{name} could not be normalized; writing an empty plane");
                    Array2::zeros((image.height(), image.width()))
                })
            })
            .collect();
        let grid = generate_patches(image.mask.view(), &cfg, seed.wrapping_add(si as u64));
        let target = out.join(&slice);
        create_dir(&target.join("planes"))?;
        create_dir(&target.join("thumbs"))?;
        for (name, plane) in channels.iter().zip(&normalized) {
            write_png8(&target.join("planes").join(format!("{name}.png")), plane)?;
        }
        let mut coords = String::new();
        let mut means = Vec::with_capacity(grid.coords.len());
        for (k, c) in grid.coords.iter().enumerate() {
            let id = format!("{slice}-p{k:03}");
            coords.push_str(&format!("{id} {} {} {} {}\n", c.x_left, c.y_bottom, c.x_right, c.y_top));
            let mut row = vec![id.clone()];
            for plane in &normalized {
                let window = plane.slice(s![c.y_bottom..c.y_top, c.x_left..c.x_right]);
                row.push(format!("{}", patch_channel_mean(window)));
            }
            means.push(row);
            std::fs::write(target.join("thumbs").join(format!("{id}.png")), crate::thumbs::patch_thumbnail(&normalized, c)?)?;
        }
        write_text(&target.join("coords.txt"), &coords)?;
        let mut header = vec!["patch_id"];
        header.extend(channels.iter().map(String::as_str));
        write_csv(&target.join("means.csv"), &header, means)?;
        println!("{slice}: {} patches ({:?})", grid.coords.len(), grid.status);
    }
    Ok(())
}

struct PreprocessedSlice {
    channels: Vec<String>,
    ids: Vec<String>,
    coords: Vec<PatchCoord>,
    means: Array2<f64>,
    planes: Vec<Array2<u8>>,
}

fn read_preprocessed(dir: &Path) -> anyhow::Result<PreprocessedSlice> {
    let mut rdr = csv::Reader::from_path(dir.join("means.csv"))?;
    let channels: Vec<String> = rdr.headers()?.iter().skip(1).map(String::from).collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        ids.push(rec.get(0).unwrap_or_default().to_string());
        for v in rec.iter().skip(1) {
            values.push(v.parse::<f64>()?);
        }
    }
    let means = Array2::from_shape_vec((ids.len(), channels.len()), values)?;
    let mut coord_of = HashMap::new();
    for line in read_text(&dir.join("coords.txt"))?.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            bail!("bad coordinate line {line:?}");
        }
        let n: Vec<usize> = f[1..].iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
        coord_of.insert(
            f[0].to_string(),
            PatchCoord {
                x_left: n[0],
                y_bottom: n[1],
                x_right: n[2],
                y_top: n[3],
            },
        );
    }
    let coords = ids
        .iter()
        .map(|id| coord_of.get(id).copied().ok_or_else(|| anyhow!("no coordinates for {id}")))
        .collect::<anyhow::Result<_>>()?;
    let planes = channels
        .iter()
        .map(|c| read_png8(&dir.join("planes").join(format!("{c}.png"))))
        .collect::<anyhow::Result<_>>()?;
    Ok(PreprocessedSlice {
        channels,
        ids,
        coords,
        means,
        planes,
    })
}

fn textgen(patches: &Path, metadata: &Path, out: &Path) -> anyhow::Result<()> {
    let manifest = load_manifest(metadata)?;
    let records: HashMap<&str, &SliceRecord> = manifest.slices.iter().map(|s| (s.slice_id.as_str(), s)).collect();
    let template = Template::default();
    let mut slices = Vec::new();
    let mut records_out = Vec::new();
    for dir in sorted_dirs(patches)? {
        if !dir.join("means.csv").exists() {
            continue;
        }
        let slice_id = dir_name(&dir);
        let record = records
            .get(slice_id.as_str())
            .ok_or_else(|| anyhow!("slice {slice_id} is not in {}", metadata.display()))?;
        let p = read_preprocessed(&dir)?;
        let summaries: Vec<BiomarkerSummary> = if p.ids.len() >= 2 {
            summarize_region(&p.channels, p.means.view())?
        } else {
            p.means
                .rows()
                .into_iter()
                .map(|row| BiomarkerSummary {
                    channels: p
                        .channels
                        .iter()
                        .zip(row)
                        .map(|(name, m)| ChannelSummary {
                            name: name.clone(),
                            mean: *m,
                            z: 0.0,
                            percentile: 1.0,
                        })
                        .collect(),
                })
                .collect()
        };
        let meta: Option<&ClinicalMetadata> = record.metadata.as_ref();
        let metadata_text = template.clinical_text(meta);
        for (k, id) in p.ids.iter().enumerate() {
            let c = p.coords[k];
            let patterns: Vec<SpatialPattern> = p
                .planes
                .iter()
                .map(|plane| assign_pattern(&spatial_metrics(plane.slice(s![c.y_bottom..c.y_top, c.x_left..c.x_right]))))
                .collect();
            records_out.push(PatchRecord {
                patch_id: id.clone(),
                slice_id: slice_id.clone(),
                coord: Some(c),
                means: p.means.row(k).to_vec(),
                text: template.synthesize(&summaries[k], &patterns, meta)?,
                metadata_text: metadata_text.clone(),
            });
        }
        let mut rec = (*record).clone();
        rec.channels = p.channels.clone();
        slices.push(rec);
    }
    let ds = Dataset::new(slices, records_out)?;
    save_manifest(&ds, out)?;
    println!("wrote {} patch descriptions to {}", ds.patches.len(), out.display());
    Ok(())
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path, holdout: Option<f64>) -> anyhow::Result<()> {
    let dir = DataDir::open(data)?;
    let cfg: AlignConfig = match config {
        Some(p) => toml::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => AlignConfig::default(),
    };
    let mut train_ids: Vec<String> = dir.dataset.patches.iter().map(|p| p.patch_id.clone()).collect();
    create_dir(out)?;
    if let Some(f) = holdout {
        let (tr, te) = split_patients(&dir.dataset, f, cfg.seed)?;
        train_ids = tr.patches.iter().map(|p| p.patch_id.clone()).collect();
        let held: BTreeSet<&str> = te.patient_ids();
        let list: String = held.iter().map(|p| format!("{p}\n")).collect();
        write_text(&out.join(HOLDOUT), &list)?;
    }
    let mut parts = Vec::with_capacity(3);
    for m in [Modality::He, Modality::Mif, Modality::Txt] {
        let raw = dir.embeddings(m)?;
        let rows = rows_by_id(&raw, &train_ids)?;
        parts.push(raw.to_f64().select(Axis(0), &rows));
    }
    let txt = parts.pop().expect("three modalities");
    let mif = parts.pop().expect("three modalities");
    let he = parts.pop().expect("three modalities");
    let output = train(&TrainData { he, mif, txt }, &cfg)?;
    output.heads.to_checkpoint().save(out.join(CHECKPOINT))?;
    write_csv(
        &out.join(LOSS_TRACE),
        &["step", "loss", "lr"],
        output.trace.iter().map(|r| vec![r.step.to_string(), format!("{:.9}", r.loss), format!("{:e}", r.lr)]),
    )?;
    write_text(&out.join("align.toml"), &toml::to_string(&cfg)?)?;
    let last = output.trace.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps on {} triples, final loss {last:.4}", output.trace.len(), train_ids.len());
    Ok(())
}

fn heads_of(model: &ModelArgs) -> anyhow::Result<Option<atlas_core::align::TriHeads>> {
    Ok(model.checkpoint.as_deref().map(load_heads).transpose()?)
}

fn holdout_of(model: &ModelArgs) -> anyhow::Result<Option<BTreeSet<String>>> {
    let Some(ck) = &model.checkpoint else {
        return Ok(None);
    };
    let dir = if ck.is_dir() { ck.clone() } else { ck.parent().map(Path::to_path_buf).unwrap_or_default() };
    Ok(DataDir::holdout(&dir)?)
}

fn index_build(model: &ModelArgs, modality: &str, holdout_only: bool, out: &Path) -> anyhow::Result<()> {
    let data = DataDir::open(&model.data)?;
    let heads = heads_of(model)?;
    let keep = if holdout_only {
        Some(holdout_of(model)?.ok_or_else(|| anyhow!("--holdout-only needs a checkpoint with holdout.txt"))?)
    } else {
        None
    };
    let modality = crate::workspace::parse_modality(modality)?;
    let index = crate::workspace::build_gallery(&data, heads.as_ref(), modality, keep.as_ref())?;
    save_index(&index, out)?;
    let crc = crc32fast::hash(&std::fs::read(out)?);
    println!("wrote {} rows (dim {}) to {}, crc32 {crc:08x}", index.len(), index.dim(), out.display());
    Ok(())
}

/// Projected embeddings of the chosen patients' patches, rows aligned by id.
fn projected_triples(model: &ModelArgs, patients: Option<&BTreeSet<String>>) -> anyhow::Result<(DataDir, Vec<String>, [Array2<f64>; 3])> {
    let data = DataDir::open(&model.data)?;
    let heads = heads_of(model)?;
    let slice_patient = data.patient_of_slice();
    let ids: Vec<String> = data
        .dataset
        .patches
        .iter()
        .filter(|p| match patients {
            None => true,
            Some(set) => slice_patient.get(p.slice_id.as_str()).is_some_and(|pt| set.contains(*pt)),
        })
        .map(|p| p.patch_id.clone())
        .collect();
    let mut z = Vec::with_capacity(3);
    for m in [Modality::He, Modality::Mif, Modality::Txt] {
        let raw = data.embeddings(m)?;
        let rows = rows_by_id(&raw, &ids)?;
        z.push(project(heads.as_ref(), &raw)?.select(Axis(0), &rows));
    }
    let txt = z.pop().expect("three");
    let mif = z.pop().expect("three");
    let he = z.pop().expect("three");
    Ok((data, ids, [he, mif, txt]))
}

fn index_eval(model: &ModelArgs, ks: &str, all: bool, out: &Path) -> anyhow::Result<()> {
    let ks: Vec<usize> = ks.split(',').map(|k| k.trim().parse()).collect::<Result<_, _>>()?;
    let patients = if all { None } else { holdout_of(model)? };
    let (_, ids, z) = projected_triples(model, patients.as_ref())?;
    let mut rows = Vec::new();
    for &k in &ks {
        for (dir, r) in six_direction_recall([z[0].view(), z[1].view(), z[2].view()], k)? {
            println!("{dir} R@{k} = {r:.4}");
            rows.push(vec![dir, k.to_string(), format!("{r:.6}"), ids.len().to_string()]);
        }
    }
    write_csv(out, &["direction", "k", "recall", "n"], rows)?;
    Ok(())
}

fn features_of(z: &[Array2<f64>; 3], features: &str) -> anyhow::Result<Array2<f64>> {
    match features {
        "he" => Ok(z[0].clone()),
        "mif" => Ok(z[1].clone()),
        "fused" => {
            let n = z[0].nrows();
            let d = z[0].ncols() + z[1].ncols();
            let mut out = Array2::zeros((n, d));
            for i in 0..n {
                let v = fuse_concat(&z[0].row(i).to_vec(), &z[1].row(i).to_vec())?;
                out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
            }
            Ok(out)
        }
        other => bail!("features must be he, mif or fused, not {other:?}"),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

fn probe(model: &ModelArgs, label: &str, features: &str, k: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let (data, ids, z) = projected_triples(model, None)?;
    let x_all = features_of(&z, features)?;
    let labels = atlas_core::ingest::label_columns(&data.dataset, &ids);
    let col = labels.get(label).ok_or_else(|| anyhow!("unknown label column {label:?}"))?;
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| col[i].is_some()).collect();
    let y: Vec<String> = keep.iter().map(|&i| col[i].clone().expect("filtered")).collect();
    let x = x_all.select(Axis(0), &keep);
    let patient = &labels["patient_id"];
    let item_patient: Vec<String> = keep.iter().map(|&i| patient[i].clone().unwrap_or_default()).collect();
    let mut first_label: BTreeMap<&str, &str> = BTreeMap::new();
    for (p, l) in item_patient.iter().zip(&y) {
        first_label.entry(p).or_insert(l);
    }
    let groups: Vec<String> = first_label.keys().map(|s| s.to_string()).collect();
    let strata: Vec<String> = first_label.values().map(|s| s.to_string()).collect();
    let plan = make_folds(&groups, GroupLevel::Patient, k, seed, Some(&strata))?;
    let folds = plan.item_folds(&item_patient)?;
    let grid = probe_grid(x.view(), &y, &folds, &PROBE_GRID)?;
    create_dir(out)?;
    let mut per_fold = Vec::new();
    let mut summary = Vec::new();
    for p in &grid.points {
        for (f, v) in p.fold_f1.iter().enumerate() {
            per_fold.push(vec![format!("{}", p.c), f.to_string(), format!("{v:.6}")]);
        }
        let (m, s) = mean_std(&p.fold_f1);
        summary.push(vec![format!("{}", p.c), format!("{m:.6}"), format!("{s:.6}"), (p.c == grid.c_star).to_string()]);
        println!("C={:<5} macro-F1 {m:.4} ± {s:.4}", p.c);
    }
    write_csv(&out.join("probe_folds.csv"), &["c", "fold", "macro_f1"], per_fold)?;
    write_csv(&out.join("probe_summary.csv"), &["c", "mean_f1", "std_f1", "selected"], summary)?;
    println!("selected C = {}", grid.c_star);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn mil(model: &ModelArgs, task: &str, features: &str, k: usize, seed: u64, epochs: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let (data, ids, z) = projected_triples(model, None)?;
    let x = features_of(&z, features)?;
    let slice_of = data.slice_of();
    let mut by_slice: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        by_slice.entry(slice_of[id.as_str()]).or_default().push(i);
    }
    let records: HashMap<&str, &SliceRecord> = data.dataset.slices.iter().map(|s| (s.slice_id.as_str(), s)).collect();
    let mut bags = Vec::new();
    let mut patients = Vec::new();
    let mut binary = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    for (slice, rows) in &by_slice {
        let rec = records[slice];
        let Some(meta) = &rec.metadata else { continue };
        match task {
            "response" => match meta.treatment_response {
                Some(r) => binary.push(r),
                None => continue,
            },
            _ => match (meta.survival_months, meta.survival_status) {
                (Some(t), Some(st)) => {
                    times.push(t);
                    events.push(st == SurvivalStatus::Deceased);
                }
                _ => continue,
            },
        }
        bags.push(x.select(Axis(0), rows));
        patients.push(rec.patient_id.clone());
    }
    if bags.is_empty() {
        bail!("no slices carry a {task} target");
    }
    let targets = if task == "response" {
        Targets::Binary(binary.clone())
    } else {
        Targets::Survival {
            times: times.clone(),
            events: events.clone(),
        }
    };
    let mut unique: Vec<String> = patients.clone();
    unique.sort();
    unique.dedup();
    let strata: Option<Vec<String>> = (task == "response").then(|| {
        unique
            .iter()
            .map(|p| {
                let i = patients.iter().position(|q| q == p).expect("patient present");
                binary[i].to_string()
            })
            .collect()
    });
    let plan = make_folds(&unique, GroupLevel::Patient, k, seed, strata.as_deref())?;
    let folds = plan.item_folds(&patients)?;
    let mut cfg = MilConfig {
        seed,
        ..MilConfig::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let (metrics, oof) = cross_validate_mil(&bags, &targets, &folds, &cfg)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for m in &metrics {
        let mut push = |name: &'static str, v: f64| {
            values.entry(name).or_default().push(v);
            rows.push(vec![m.fold.to_string(), m.n_train.to_string(), m.n_test.to_string(), "ok".into(), name.into(), format!("{v:.6}")]);
        };
        match &m.outcome {
            FoldOutcome::Classification { auroc, auprc } => {
                push("auroc", *auroc);
                push("auprc", *auprc);
            }
            FoldOutcome::Survival { c_index } => push("c_index", *c_index),
            FoldOutcome::Skipped { reason } => rows.push(vec![
                m.fold.to_string(),
                m.n_train.to_string(),
                m.n_test.to_string(),
                "skipped".into(),
                reason.clone(),
                "NA".into(),
            ]),
        }
    }
    write_csv(&out.join("mil_folds.csv"), &["fold", "n_train", "n_test", "status", "metric", "value"], rows)?;
    let summary: Vec<Vec<String>> = values
        .iter()
        .map(|(name, v)| {
            let (m, s) = mean_std(v);
            println!("{name}: {m:.4} ± {s:.4} over {} folds", v.len());
            vec![name.to_string(), format!("{m:.6}"), format!("{s:.6}"), v.len().to_string()]
        })
        .collect();
    write_csv(&out.join("mil_summary.csv"), &["metric", "mean", "std", "folds"], summary)?;

    if task == "survival" {
        let scored: Vec<usize> = (0..oof.len()).filter(|&i| oof[i].is_some()).collect();
        let risks: Vec<f64> = scored.iter().map(|&i| oof[i].expect("filtered")).collect();
        let t: Vec<f64> = scored.iter().map(|&i| times[i]).collect();
        let e: Vec<bool> = scored.iter().map(|&i| events[i]).collect();
        let high = median_split(&risks);
        match km_logrank(&t, &e, &high) {
            Ok(km) => {
                let mut curve = Vec::new();
                for (group, steps) in [("low", &km.low), ("high", &km.high)] {
                    for st in steps {
                        curve.push(vec![format!("{}", st.time), format!("{:.6}", st.survival), group.into()]);
                    }
                }
                write_csv(&out.join("km.csv"), &["time", "survival", "group"], curve)?;
                if let Some(lr) = km.logrank {
                    println!("log-rank chi2 {:.4}, p {:.4e}", lr.chi_square, lr.p_value);
                    write_csv(
                        &out.join("logrank.csv"),
                        &["chi_square", "p_value", "observed_high", "expected_high"],
                        [vec![
                            format!("{:.6}", lr.chi_square),
                            format!("{:.6e}", lr.p_value),
                            format!("{}", lr.observed),
                            format!("{:.6}", lr.expected),
                        ]],
                    )?;
                }
            }
            Err(e) => eprintln!("warning: KM comparison skipped: {e}"),
        }
    }
    Ok(())
}
