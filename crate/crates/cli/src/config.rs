//! Layered run configuration: flags override config-file values, which
//! override built-in defaults. The file is a flat TOML document; unknown
//! keys are rejected so typos fail loudly instead of silently using a
//! default.

use std::path::{Path, PathBuf};

use fsr_core::embednet::Fusion;
use fsr_core::synth::SynthConfig;
use fsr_core::{Error, Result};
use serde::Deserialize;

/// Raw config file; every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,

    // Stage parameters.
    pub epsilon: Option<f64>,
    pub k_attributes: Option<usize>,
    pub context_dim: Option<usize>,
    pub loss_ratio: Option<f64>,
    pub alpha: Option<f64>,
    pub top_ks: Option<Vec<usize>>,
    pub k_search: Option<usize>,
    pub embed_dim: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub fusion: Option<String>,
    pub context_epochs: Option<usize>,
    pub context_learning_rate: Option<f64>,
    pub margin: Option<f64>,
    pub negatives: Option<usize>,

    // Synthetic corpus shape.
    pub categories: Option<usize>,
    pub identities_per_category: Option<usize>,
    pub attributes_per_category: Option<usize>,
    pub dim: Option<usize>,
    pub instance_noise_sigma: Option<f64>,
    pub instances_per_identity: Option<usize>,
    pub context_groups: Option<usize>,
    pub designs: Option<usize>,

    // Artifact paths; unset keys fall back to canonical names in out_dir.
    pub catalog_path: Option<PathBuf>,
    pub identities_path: Option<PathBuf>,
    pub instances_path: Option<PathBuf>,
    pub queries_path: Option<PathBuf>,
    pub designs_path: Option<PathBuf>,
    pub truth_path: Option<PathBuf>,
    pub zca_path: Option<PathBuf>,
    pub whitened_identities_path: Option<PathBuf>,
    pub whitened_instances_path: Option<PathBuf>,
    pub attributes_stem: Option<PathBuf>,
    pub checkpoint_stem: Option<PathBuf>,
    pub projected_identities_path: Option<PathBuf>,
    pub projected_instances_path: Option<PathBuf>,
    pub retrieval_path: Option<PathBuf>,
    pub context_path: Option<PathBuf>,
    pub reranked_path: Option<PathBuf>,
    pub report_before_path: Option<PathBuf>,
    pub report_after_path: Option<PathBuf>,
}

/// Parses a flat TOML config file.
pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Fully resolved settings, defaults filled in.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub epsilon: f64,
    pub k_attributes: usize,
    pub context_dim: usize,
    pub loss_ratio: f64,
    pub alpha: f64,
    pub top_ks: Vec<usize>,
    pub k_search: usize,
    pub embed_dim: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fusion: Fusion,
    pub context_epochs: usize,
    pub context_learning_rate: f64,
    pub margin: f64,
    pub negatives: usize,
    pub synth: SynthConfig,
    file: FileConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            out_dir: PathBuf::from("artifacts"),
            epsilon: 1e-5,
            k_attributes: 150,
            context_dim: 100,
            loss_ratio: 10.0,
            alpha: 0.5,
            top_ks: vec![1, 5, 10],
            k_search: 10,
            embed_dim: None,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            fusion: Fusion::SubtractRelu,
            context_epochs: 40,
            context_learning_rate: 0.05,
            margin: 0.2,
            negatives: 5,
            synth: SynthConfig::default(),
            file: FileConfig::default(),
        }
    }
}

pub fn parse_fusion(name: &str) -> Result<Fusion> {
    match name {
        "subtract_relu" => Ok(Fusion::SubtractRelu),
        "squared_diff" => Ok(Fusion::SquaredDiff),
        other => Err(Error::Config(format!(
            "unknown fusion {other:?}, expected subtract_relu or squared_diff"
        ))),
    }
}

impl Settings {
    /// Applies file values over the defaults; flags are applied afterwards
    /// by the caller, giving flags the last word.
    pub fn resolve(file: FileConfig) -> Result<Settings> {
        let d = Settings::default();
        let fusion = match &file.fusion {
            Some(name) => parse_fusion(name)?,
            None => d.fusion,
        };
        let seed = file.seed.unwrap_or(d.seed);
        Ok(Settings {
            seed,
            out_dir: file.out_dir.clone().unwrap_or(d.out_dir),
            epsilon: file.epsilon.unwrap_or(d.epsilon),
            k_attributes: file.k_attributes.unwrap_or(d.k_attributes),
            context_dim: file.context_dim.unwrap_or(d.context_dim),
            loss_ratio: file.loss_ratio.unwrap_or(d.loss_ratio),
            alpha: file.alpha.unwrap_or(d.alpha),
            top_ks: file.top_ks.clone().unwrap_or(d.top_ks),
            k_search: file.k_search.unwrap_or(d.k_search),
            embed_dim: file.embed_dim.or(d.embed_dim),
            epochs: file.epochs.unwrap_or(d.epochs),
            batch_size: file.batch_size.unwrap_or(d.batch_size),
            learning_rate: file.learning_rate.unwrap_or(d.learning_rate),
            fusion,
            context_epochs: file.context_epochs.unwrap_or(d.context_epochs),
            context_learning_rate: file
                .context_learning_rate
                .unwrap_or(d.context_learning_rate),
            margin: file.margin.unwrap_or(d.margin),
            negatives: file.negatives.unwrap_or(d.negatives),
            synth: SynthConfig {
                categories: file.categories.unwrap_or(d.synth.categories),
                identities_per_category: file
                    .identities_per_category
                    .unwrap_or(d.synth.identities_per_category),
                attributes_per_category: file
                    .attributes_per_category
                    .unwrap_or(d.synth.attributes_per_category),
                dim: file.dim.unwrap_or(d.synth.dim),
                instance_noise_sigma: file
                    .instance_noise_sigma
                    .unwrap_or(d.synth.instance_noise_sigma),
                instances_per_identity: file
                    .instances_per_identity
                    .unwrap_or(d.synth.instances_per_identity),
                context_groups: file.context_groups.unwrap_or(d.synth.context_groups),
                designs: file.designs.unwrap_or(d.synth.designs),
                seed,
            },
            file,
        })
    }

    /// Threads requested by the config file, if any. Flag and env override
    /// in `main`.
    pub fn file_threads(&self) -> Option<usize> {
        self.file.threads
    }

    fn artifact(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.artifact(&self.file.catalog_path.clone(), "catalog.jsonl")
    }
    pub fn identities_path(&self) -> PathBuf {
        self.artifact(&self.file.identities_path.clone(), "identities.emb")
    }
    pub fn instances_path(&self) -> PathBuf {
        self.artifact(&self.file.instances_path.clone(), "instances.emb")
    }
    pub fn queries_path(&self) -> PathBuf {
        self.artifact(&self.file.queries_path.clone(), "queries.jsonl")
    }
    pub fn designs_path(&self) -> PathBuf {
        self.artifact(&self.file.designs_path.clone(), "designs.jsonl")
    }
    pub fn truth_path(&self) -> PathBuf {
        self.artifact(&self.file.truth_path.clone(), "truth.json")
    }
    pub fn zca_path(&self) -> PathBuf {
        self.artifact(&self.file.zca_path.clone(), "zca.emb")
    }
    pub fn whitened_identities_path(&self) -> PathBuf {
        self.artifact(&self.file.whitened_identities_path.clone(), "identities.white.emb")
    }
    pub fn whitened_instances_path(&self) -> PathBuf {
        self.artifact(&self.file.whitened_instances_path.clone(), "instances.white.emb")
    }
    pub fn attributes_stem(&self) -> PathBuf {
        self.artifact(&self.file.attributes_stem.clone(), "attributes")
    }
    pub fn checkpoint_stem(&self) -> PathBuf {
        self.artifact(&self.file.checkpoint_stem.clone(), "embednet")
    }
    pub fn projected_identities_path(&self) -> PathBuf {
        self.artifact(&self.file.projected_identities_path.clone(), "identities.proj.emb")
    }
    pub fn projected_instances_path(&self) -> PathBuf {
        self.artifact(&self.file.projected_instances_path.clone(), "instances.proj.emb")
    }
    pub fn retrieval_path(&self) -> PathBuf {
        self.artifact(&self.file.retrieval_path.clone(), "retrieval.jsonl")
    }
    pub fn context_path(&self) -> PathBuf {
        self.artifact(&self.file.context_path.clone(), "context.emb")
    }
    pub fn reranked_path(&self) -> PathBuf {
        self.artifact(&self.file.reranked_path.clone(), "reranked.jsonl")
    }
    pub fn report_before_path(&self) -> PathBuf {
        self.artifact(&self.file.report_before_path.clone(), "eval_before.json")
    }
    pub fn report_after_path(&self) -> PathBuf {
        self.artifact(&self.file.report_after_path.clone(), "eval_after.json")
    }
}
