//! Service configuration (`atlas.toml`).
//!
//! ```toml
//! listen = "127.0.0.1:7878"
//! cors_origins = ["http://localhost:8000"]
//!
//! [defaults]
//! inference_alpha = 0.8
//! counterfactual_alpha = 0.6
//!
//! [source]
//! kind = "files"
//! data = "data"
//! checkpoint = "ckpt/heads.hkck"
//!
//! [[source.galleries]]
//! name = "mif"
//! path = "mif.hki"
//! crc32 = "1c291ca3"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use atlas_core::counterfactual::planted::PlantedConfig;
use atlas_core::counterfactual::{CompositionTest, DEFAULT_CLUSTERS, DEFAULT_Q, MIN_CLUSTER_SIZE};
use atlas_core::retrieval::{DEFAULT_INFERENCE_ALPHA, DEFAULT_INFERENCE_K};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Allowed browser origins; `"*"` allows any. Empty disables CORS.
    #[serde(default)]
    pub cors_origins: Vec<String>,
    #[serde(default)]
    pub defaults: Defaults,
    pub source: Source,
}

fn default_listen() -> String {
    "127.0.0.1:7878".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub inference_alpha: f64,
    pub counterfactual_alpha: f64,
    pub inference_k: usize,
    pub counterfactual_k: usize,
    /// Requests asking for more than this many neighbors are rejected.
    pub max_k: usize,
    pub clusters: usize,
    pub min_cluster_size: usize,
    pub q: f64,
    pub seed: u64,
    pub label_column: Option<String>,
    pub composition_test: CompositionTest,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            inference_alpha: DEFAULT_INFERENCE_ALPHA,
            counterfactual_alpha: atlas_core::counterfactual::DEFAULT_ALPHA,
            inference_k: DEFAULT_INFERENCE_K,
            counterfactual_k: atlas_core::counterfactual::DEFAULT_K,
            max_k: 1000,
            clusters: DEFAULT_CLUSTERS,
            min_cluster_size: MIN_CLUSTER_SIZE,
            q: DEFAULT_Q,
            seed: 0,
            label_column: Some("n_stage".into()),
            composition_test: CompositionTest::RankSum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// A data directory written by `atlas synth` (or ingest + textgen), a
    /// checkpoint, and one or more index snapshots built from them.
    Files {
        data: PathBuf,
        checkpoint: Option<PathBuf>,
        galleries: Vec<GallerySpec>,
        #[serde(default)]
        thumbnails: Option<PathBuf>,
    },
    /// The in-memory planted cohort.
    Planted {
        #[serde(default)]
        planted: PlantedConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GallerySpec {
    pub name: String,
    pub path: PathBuf,
    /// Expected CRC-32 of the snapshot file, lowercase hex.
    #[serde(default)]
    pub crc32: Option<String>,
}

impl ServiceConfig {
    pub fn planted() -> Self {
        ServiceConfig {
            listen: default_listen(),
            cors_origins: Vec::new(),
            defaults: Defaults::default(),
            source: Source::Planted {
                planted: PlantedConfig::default(),
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Source::Files {
            data,
            checkpoint,
            galleries,
            thumbnails,
        } = &mut self.source
        {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(data);
            if let Some(c) = checkpoint {
                fix(c);
            }
            if let Some(t) = thumbnails {
                fix(t);
            }
            for g in galleries {
                fix(&mut g.path);
            }
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr> {
        self.listen
            .parse()
            .map_err(|e| ServiceError::Config(format!("listen address {:?}: {e}", self.listen)))
    }

    pub fn validate(&self) -> Result<()> {
        self.listen_addr()?;
        let d = &self.defaults;
        for (name, a) in [("inference_alpha", d.inference_alpha), ("counterfactual_alpha", d.counterfactual_alpha)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(ServiceError::Config(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        if d.max_k == 0 || d.inference_k == 0 || d.counterfactual_k == 0 {
            return Err(ServiceError::Config("K values must be positive".into()));
        }
        if d.inference_k > d.max_k || d.counterfactual_k > d.max_k {
            return Err(ServiceError::Config("default K exceeds max_k".into()));
        }
        if d.clusters == 0 {
            return Err(ServiceError::Config("clusters must be positive".into()));
        }
        if !(d.q > 0.0 && d.q < 1.0) {
            return Err(ServiceError::Config(format!("q must lie in (0, 1), got {}", d.q)));
        }
        if let Source::Files { galleries, .. } = &self.source {
            if galleries.is_empty() {
                return Err(ServiceError::Config("at least one gallery is required".into()));
            }
            let mut names: Vec<&str> = galleries.iter().map(|g| g.name.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != galleries.len() {
                return Err(ServiceError::Config("gallery names must be unique".into()));
            }
            for g in galleries {
                if let Some(c) = &g.crc32 {
                    if c.len() != 8 || !c.chars().all(|ch| ch.is_ascii_hexdigit()) {
                        return Err(ServiceError::Config(format!("gallery {}: crc32 must be 8 hex digits", g.name)));
                    }
                }
            }
        }
        Ok(())
    }
}
