//! Pipeline driver for furniture set retrieval: every stage is a
//! subcommand sharing a flat TOML config, and `pipeline` chains them all.
//!
//! Exit codes: 0 success, 1 stage or validation failure, 2 usage error.
//! Failures print a one-line JSON object to stderr with a stable `error`
//! code and a human-readable `message`.

mod config;
mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{load_file_config, parse_fusion, FileConfig, Settings};
use fsr_core::context::ContextTrainConfig;
use fsr_core::embednet::TrainConfig;
use fsr_core::rerank::RerankConfig;
use stages::ProjectionOutputs;

#[derive(Parser)]
#[command(
    name = "fsr",
    version,
    about = "Furniture set retrieval: whiten, cluster, embed, search, re-rank, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed shared by every randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap; env FSR_THREADS is equivalent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for artifacts not given an explicit path.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted ground truth.
    Synth(SynthArgs),
    /// Check cross-artifact referential integrity.
    Validate(ArtifactPaths),
    /// Fit a whitening transform and apply it to embedding files.
    Whiten(WhitenArgs),
    /// Cluster identities into per-category attributes under a budget.
    Cluster(ClusterArgs),
    /// Train the verification-plus-attribute embedding.
    TrainEmbed(TrainEmbedArgs),
    /// Build the exhaustive index and report its shape.
    Index(IndexArgs),
    /// Retrieve top-k candidates for every query instance.
    Search(SearchArgs),
    /// Train context vectors from design-set co-occurrence.
    TrainContext(TrainContextArgs),
    /// Re-rank retrieval rows image by image with the context blend.
    Rerank(RerankArgs),
    /// Score ranked results and write an accuracy report.
    Eval(EvalArgs),
    /// Run every stage in order on one synthetic corpus.
    Pipeline,
    /// Summarize any artifact file without loading the full payload.
    Describe(DescribeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generate the feature-ambiguous fixture instead of the plain corpus.
    #[arg(long)]
    fixture: bool,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    identities_per_category: Option<usize>,
    #[arg(long)]
    attributes_per_category: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    instance_noise_sigma: Option<f64>,
    #[arg(long)]
    instances_per_identity: Option<usize>,
    #[arg(long)]
    context_groups: Option<usize>,
    /// Design sets to sample.
    #[arg(long)]
    designs: Option<usize>,
}

#[derive(Args)]
struct ArtifactPaths {
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    identities: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    designs: Option<PathBuf>,
}

#[derive(Args)]
struct WhitenArgs {
    /// Matrix to fit the transform on.
    #[arg(long)]
    identities: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Where the fitted model is written.
    #[arg(long)]
    model: Option<PathBuf>,
    /// src=dst pair to whiten; repeatable. Defaults to the identity and
    /// instance matrices when omitted.
    #[arg(long = "apply", value_name = "SRC=DST")]
    applies: Vec<String>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Whitened identity matrix.
    #[arg(long)]
    identities: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Total attribute budget across all categories.
    #[arg(long)]
    k_attributes: Option<usize>,
    /// Output stem for labels, centroids, and metadata.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainEmbedArgs {
    /// Whitened instance matrix.
    #[arg(long)]
    instances: Option<PathBuf>,
    /// Whitened identity matrix.
    #[arg(long)]
    identities: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Attribute assignment stem from `cluster`.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Output checkpoint stem.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    loss_ratio: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// subtract_relu or squared_diff.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Sample negatives uniformly instead of mining the hardest.
    #[arg(long)]
    no_ohnm: bool,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Identity matrix to index (whitened when --checkpoint projects it).
    #[arg(long)]
    identities: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Instance matrix to query with.
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Search the whole catalog instead of the query's category.
    #[arg(long)]
    unfiltered: bool,
    /// Checkpoint stem; when set, both matrices are projected through the
    /// trained embedding (quantized, unit rows) before the search and the
    /// projections are persisted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainContextArgs {
    #[arg(long)]
    designs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    retrieval: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Trained context vectors.
    #[arg(long)]
    context: Option<PathBuf>,
    /// Feature weight; 1 - alpha weighs context.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k_out: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ranked results to score.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Treat the results file as re-ranked output.
    #[arg(long)]
    reranked: bool,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    /// Artifact file to summarize.
    path: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let code = err
            .chain()
            .find_map(|cause| cause.downcast_ref::<fsr_core::Error>().map(fsr_core::Error::code))
            .unwrap_or("Error");
        eprintln!(
            "{}",
            serde_json::json!({ "error": code, "message": format!("{err:#}") })
        );
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file: FileConfig = match &cli.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };
    let mut settings = Settings::resolve(file)?;
    if let Some(seed) = cli.seed {
        settings.seed = seed;
        settings.synth.seed = seed;
    }
    if let Some(out_dir) = &cli.out_dir {
        settings.out_dir = out_dir.clone();
    }
    init_threads(cli.threads, settings.file_threads())?;

    match cli.command {
        Command::Synth(args) => {
            let s = &mut settings.synth;
            if let Some(v) = args.categories {
                s.categories = v;
            }
            if let Some(v) = args.identities_per_category {
                s.identities_per_category = v;
            }
            if let Some(v) = args.attributes_per_category {
                s.attributes_per_category = v;
            }
            if let Some(v) = args.dim {
                s.dim = v;
            }
            if let Some(v) = args.instance_noise_sigma {
                s.instance_noise_sigma = v;
            }
            if let Some(v) = args.instances_per_identity {
                s.instances_per_identity = v;
            }
            if let Some(v) = args.context_groups {
                s.context_groups = v;
            }
            if let Some(v) = args.designs {
                s.designs = v;
            }
            stages::run_synth(&settings, args.fixture)
        }
        Command::Validate(args) => stages::run_validate(
            &args.catalog.unwrap_or_else(|| settings.catalog_path()),
            &args.identities.unwrap_or_else(|| settings.identities_path()),
            &args.queries.unwrap_or_else(|| settings.queries_path()),
            &args.designs.unwrap_or_else(|| settings.designs_path()),
        ),
        Command::Whiten(args) => {
            let applies = if args.applies.is_empty() {
                vec![
                    (settings.identities_path(), settings.whitened_identities_path()),
                    (settings.instances_path(), settings.whitened_instances_path()),
                ]
            } else {
                args.applies
                    .iter()
                    .map(|pair| {
                        pair.split_once('=')
                            .map(|(src, dst)| (PathBuf::from(src), PathBuf::from(dst)))
                            .ok_or_else(|| {
                                fsr_core::Error::Config(format!(
                                    "--apply expects SRC=DST, got {pair:?}"
                                ))
                            })
                    })
                    .collect::<fsr_core::Result<_>>()?
            };
            stages::run_whiten(
                &args.identities.unwrap_or_else(|| settings.identities_path()),
                args.epsilon.unwrap_or(settings.epsilon),
                &args.model.unwrap_or_else(|| settings.zca_path()),
                &applies,
            )
        }
        Command::Cluster(args) => stages::run_cluster(
            &args.identities.unwrap_or_else(|| settings.whitened_identities_path()),
            &args.catalog.unwrap_or_else(|| settings.catalog_path()),
            args.k_attributes.unwrap_or(settings.k_attributes),
            &args.out.unwrap_or_else(|| settings.attributes_stem()),
            settings.seed,
        ),
        Command::TrainEmbed(args) => {
            let fusion = match &args.fusion {
                Some(name) => parse_fusion(name)?,
                None => settings.fusion,
            };
            stages::run_train_embed(
                &args.instances.unwrap_or_else(|| settings.whitened_instances_path()),
                &args.identities.unwrap_or_else(|| settings.whitened_identities_path()),
                &args.queries.unwrap_or_else(|| settings.queries_path()),
                &args.attributes.unwrap_or_else(|| settings.attributes_stem()),
                &args.out.unwrap_or_else(|| settings.checkpoint_stem()),
                &TrainConfig {
                    loss_ratio: args.loss_ratio.unwrap_or(settings.loss_ratio),
                    learning_rate: args.learning_rate.unwrap_or(settings.learning_rate),
                    epochs: args.epochs.unwrap_or(settings.epochs),
                    batch_size: args.batch_size.unwrap_or(settings.batch_size),
                    seed: settings.seed,
                    ohnm: !args.no_ohnm,
                    embed_dim: args.embed_dim.or(settings.embed_dim),
                    fusion,
                    ..Default::default()
                },
            )
        }
        Command::Index(args) => stages::run_index(
            &args.embeddings.unwrap_or_else(|| settings.identities_path()),
            &args.catalog.unwrap_or_else(|| settings.catalog_path()),
        ),
        Command::Search(args) => {
            let checkpoint = args.checkpoint.as_deref().map(|stem| {
                (
                    stem,
                    ProjectionOutputs {
                        identities_out: settings.projected_identities_path(),
                        instances_out: settings.projected_instances_path(),
                    },
                )
            });
            stages::run_search(
                &args.identities.unwrap_or_else(|| settings.identities_path()),
                &args.catalog.unwrap_or_else(|| settings.catalog_path()),
                &args.instances.unwrap_or_else(|| settings.instances_path()),
                &args.queries.unwrap_or_else(|| settings.queries_path()),
                args.k.unwrap_or(settings.k_search),
                &args.out.unwrap_or_else(|| settings.retrieval_path()),
                args.unfiltered,
                checkpoint,
            )
        }
        Command::TrainContext(args) => stages::run_train_context(
            &args.designs.unwrap_or_else(|| settings.designs_path()),
            &args.out.unwrap_or_else(|| settings.context_path()),
            &ContextTrainConfig {
                dim: args.context_dim.unwrap_or(settings.context_dim),
                margin: args.margin.unwrap_or(settings.margin),
                negatives: args.negatives.unwrap_or(settings.negatives),
                learning_rate: args.learning_rate.unwrap_or(settings.context_learning_rate),
                epochs: args.epochs.unwrap_or(settings.context_epochs),
                seed: settings.seed,
            },
        ),
        Command::Rerank(args) => stages::run_rerank(
            &args.retrieval.unwrap_or_else(|| settings.retrieval_path()),
            &args.queries.unwrap_or_else(|| settings.queries_path()),
            &args.context.unwrap_or_else(|| settings.context_path()),
            &RerankConfig {
                alpha: args.alpha.unwrap_or(settings.alpha),
                k_out: args.k_out.unwrap_or(settings.k_search),
                ..Default::default()
            },
            &args.out.unwrap_or_else(|| settings.reranked_path()),
        ),
        Command::Eval(args) => stages::run_eval(
            &args.results.unwrap_or_else(|| {
                if args.reranked {
                    settings.reranked_path()
                } else {
                    settings.retrieval_path()
                }
            }),
            args.reranked,
            &args.queries.unwrap_or_else(|| settings.queries_path()),
            &args.ks.unwrap_or_else(|| settings.top_ks.clone()),
            &args.out.unwrap_or_else(|| {
                if args.reranked {
                    settings.report_after_path()
                } else {
                    settings.report_before_path()
                }
            }),
        ),
        Command::Pipeline => stages::run_pipeline(&settings),
        Command::Describe(args) => stages::run_describe(&args.path),
    }
}

/// Caps the global worker pool: flag beats FSR_THREADS beats the config
/// file; absent all three, the library picks its own width.
fn init_threads(flag: Option<usize>, file: Option<usize>) -> Result<()> {
    let env = std::env::var("FSR_THREADS").ok().and_then(|raw| raw.parse::<usize>().ok());
    let threads = flag.or(env).or(file);
    if let Some(n) = threads {
        if n == 0 {
            return Err(fsr_core::Error::Config("threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fsr_core::Error::Config(e.to_string()))?;
    }
    Ok(())
}
