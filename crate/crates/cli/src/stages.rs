//! Stage runners behind the subcommands.
//!
//! The pipeline chains these through their persisted artifacts rather than
//! in-memory values, so re-running any single stage from disk reproduces
//! the pipeline's result for that stage bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fsr_core::attributes::{allocate_cluster_budget, cluster_attributes, ClusterParams};
use fsr_core::context::{load_context, save_context, train_context_model, ContextTrainConfig};
use fsr_core::embednet::{load_checkpoint, save_checkpoint, train_embedding_model, TrainConfig};
use fsr_core::error::Error;
use fsr_core::eval::{evaluate, format_table, write_report};
use fsr_core::index::{load_retrieval, save_retrieval, SearchIndex};
use fsr_core::ingest::{
    load_catalog, load_design_sets, load_queries, read_embeddings, validate_dataset,
    write_catalog, write_design_sets, write_embeddings, write_queries, EMBEDDING_MAGIC,
};
use fsr_core::rerank::{load_reranked, rerank_grouped, save_reranked, RerankConfig};
use fsr_core::synth::{generate_context_fixture, generate_synthetic_dataset, SyntheticDataset};
use fsr_core::whiten::{apply_zca, fit_zca, l2_normalize, load_zca, save_zca};

use crate::config::Settings;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Tags a load result with the file it came from.
fn named<T>(path: &Path, result: fsr_core::Result<T>) -> Result<T> {
    result.with_context(|| path.display().to_string())
}

/// Generates a synthetic corpus (or the feature-ambiguous fixture) and
/// writes all five dataset artifacts plus the planted ground truth.
pub fn run_synth(settings: &Settings, fixture: bool) -> Result<()> {
    let data: SyntheticDataset = if fixture {
        generate_context_fixture(settings.seed)?
    } else {
        generate_synthetic_dataset(&settings.synth)?
    };
    for path in [
        settings.catalog_path(),
        settings.identities_path(),
        settings.instances_path(),
        settings.queries_path(),
        settings.designs_path(),
        settings.truth_path(),
    ] {
        ensure_parent(&path)?;
    }
    write_catalog(settings.catalog_path(), &data.catalog)?;
    write_embeddings(settings.identities_path(), &data.identities)?;
    write_embeddings(settings.instances_path(), &data.instances)?;
    write_queries(settings.queries_path(), &data.queries)?;
    write_design_sets(settings.designs_path(), &data.designs.sets)?;
    let mut truth = serde_json::to_vec_pretty(&data.truth)?;
    truth.push(b'\n');
    std::fs::write(settings.truth_path(), truth)?;
    println!(
        "synth: {} identities, {} instances, {} design sets -> {}",
        data.identities.len(),
        data.instances.len(),
        data.designs.sets.len(),
        settings.out_dir.display()
    );
    Ok(())
}

/// Checks cross-artifact referential integrity; a report with defects is a
/// validation failure.
pub fn run_validate(
    catalog: &Path,
    identities: &Path,
    queries: &Path,
    designs: &Path,
) -> Result<()> {
    let report = validate_dataset(
        &named(catalog, load_catalog(catalog))?,
        &named(identities, read_embeddings(identities))?,
        &named(queries, load_queries(queries))?,
        &named(designs, load_design_sets(designs))?,
    );
    println!("{}", serde_json::to_string(&report)?);
    if !report.ok() {
        return Err(Error::Validation(format!(
            "{} catalog ids without embeddings, {} unknown gt ids, {} unknown design items",
            report.catalog_without_embedding.len(),
            report.unknown_gt.len(),
            report.unknown_design_items.len()
        ))
        .into());
    }
    Ok(())
}

/// Fits a whitening transform and applies it to each `src=dst` pair.
pub fn run_whiten(
    identities: &Path,
    epsilon: f64,
    model_out: &Path,
    applies: &[(PathBuf, PathBuf)],
) -> Result<()> {
    let fit_on = named(identities, read_embeddings(identities))?;
    let model = fit_zca(&fit_on, epsilon)?;
    ensure_parent(model_out)?;
    save_zca(model_out, &model)?;
    println!("whiten: fit on {} rows x {} dims -> {}", fit_on.len(), fit_on.dim(), model_out.display());
    // Apply from the persisted model so a later stand-alone apply matches.
    let loaded = load_zca(model_out)?;
    for (src, dst) in applies {
        let white = apply_zca(&loaded, &named(src, read_embeddings(src))?)?;
        ensure_parent(dst)?;
        write_embeddings(dst, &white)?;
        println!("whiten: applied to {} -> {}", src.display(), dst.display());
    }
    Ok(())
}

/// Clusters identities into per-category attributes under a global budget.
pub fn run_cluster(
    identities: &Path,
    catalog: &Path,
    k_total: usize,
    stem: &Path,
    seed: u64,
) -> Result<()> {
    let matrix = named(identities, read_embeddings(identities))?;
    let catalog = named(catalog, load_catalog(catalog))?;
    let budget = allocate_cluster_budget(&catalog, k_total)?;
    let assignment = cluster_attributes(
        &matrix,
        &catalog,
        &budget,
        &ClusterParams { seed, ..Default::default() },
    )?;
    ensure_parent(stem)?;
    fsr_core::attributes::save_assignment(stem, &assignment)?;
    println!(
        "cluster: {} identities -> {} attributes across {} categories, cost {:.6}",
        matrix.len(),
        assignment.k_total(),
        budget.len(),
        assignment.total_cost
    );
    Ok(())
}

/// Trains the verification-plus-attribute embedding and checkpoints it.
#[allow(clippy::too_many_arguments)]
pub fn run_train_embed(
    instances: &Path,
    identities: &Path,
    queries: &Path,
    attributes_stem: &Path,
    out_stem: &Path,
    config: &TrainConfig,
) -> Result<()> {
    let instances = named(instances, read_embeddings(instances))?;
    let identities = named(identities, read_embeddings(identities))?;
    let queries = named(queries, load_queries(queries))?;
    let attributes = named(attributes_stem, fsr_core::attributes::load_assignment(attributes_stem))?;
    let gt: std::collections::HashMap<String, String> = queries
        .queries()
        .iter()
        .map(|q| (q.instance_id.clone(), q.gt.clone()))
        .collect();
    let trained = train_embedding_model(&instances, &identities, &gt, &attributes, config)?;
    ensure_parent(out_stem)?;
    save_checkpoint(out_stem, &trained, config)?;
    let last = trained.metrics.last().expect("at least one epoch");
    println!(
        "train-embed: {} epochs, final losses {:.6}/{:.6} -> {}",
        trained.metrics.len(),
        last.verification_loss,
        last.classification_loss,
        out_stem.display()
    );
    Ok(())
}

/// Builds the exhaustive index and reports its shape.
pub fn run_index(embeddings: &Path, catalog: &Path) -> Result<()> {
    let matrix = named(embeddings, read_embeddings(embeddings))?;
    let catalog = named(catalog, load_catalog(catalog))?;
    let index = SearchIndex::build(&matrix, &catalog)?;
    let categories: std::collections::BTreeSet<&str> =
        catalog.entries().iter().map(|e| e.category.as_str()).collect();
    println!(
        "index: {} rows x {} dims, {} categories",
        index.len(),
        index.dim(),
        categories.len()
    );
    Ok(())
}

/// Projects whitened matrices through a trained checkpoint: quantized
/// weights, then unit-length rows, written next to the inputs for the
/// search stage.
pub struct ProjectionOutputs {
    pub identities_out: PathBuf,
    pub instances_out: PathBuf,
}

/// Retrieves top-k candidates for every query instance.
///
/// With a checkpoint stem the identity and instance matrices are first
/// projected (quantized weights, unit-length rows) and the projections are
/// persisted, so a later `search` run on those files reproduces this one.
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    identities: &Path,
    catalog: &Path,
    instances: &Path,
    queries: &Path,
    k: usize,
    out: &Path,
    unfiltered: bool,
    checkpoint: Option<(&Path, ProjectionOutputs)>,
) -> Result<()> {
    let mut identity_matrix = named(identities, read_embeddings(identities))?;
    let mut instance_matrix = named(instances, read_embeddings(instances))?;
    if let Some((stem, outputs)) = checkpoint {
        let (projection, _, _, _) = named(stem, load_checkpoint(stem))?;
        let (ident, _) = l2_normalize(&projection.project_matrix(&identity_matrix)?);
        let (inst, _) = l2_normalize(&projection.project_matrix(&instance_matrix)?);
        ensure_parent(&outputs.identities_out)?;
        ensure_parent(&outputs.instances_out)?;
        write_embeddings(&outputs.identities_out, &ident)?;
        write_embeddings(&outputs.instances_out, &inst)?;
        identity_matrix = read_embeddings(&outputs.identities_out)?;
        instance_matrix = read_embeddings(&outputs.instances_out)?;
    }
    let catalog = named(catalog, load_catalog(catalog))?;
    let queries = named(queries, load_queries(queries))?;
    let index = SearchIndex::build(&identity_matrix, &catalog)?;
    let filters: Option<Vec<String>> = if unfiltered {
        None
    } else {
        Some(
            (0..instance_matrix.len())
                .map(|row| {
                    let id = instance_matrix.id(row);
                    queries
                        .get(id)
                        .map(|q| q.category.clone())
                        .ok_or_else(|| Error::Validation(format!("instance {id:?} has no query")))
                })
                .collect::<fsr_core::Result<_>>()?,
        )
    };
    let outcome = index.batch_search(&instance_matrix, filters.as_deref(), k)?;
    if let Some((id, err)) = outcome.row_errors.into_iter().next() {
        return Err(Error::Validation(format!("search failed for instance {id:?}: {err}")).into());
    }
    ensure_parent(out)?;
    save_retrieval(out, &outcome.matrix)?;
    println!("search: {} rows, k={} -> {}", outcome.matrix.len(), k, out.display());
    Ok(())
}

/// Trains context vectors from design-set co-occurrence.
pub fn run_train_context(designs: &Path, out: &Path, config: &ContextTrainConfig) -> Result<()> {
    let sets = named(designs, load_design_sets(designs))?;
    let outcome = train_context_model(&sets, config)?;
    ensure_parent(out)?;
    save_context(out, &outcome.model)?;
    let last = outcome.epoch_losses.last().copied().unwrap_or(0.0);
    println!(
        "train-context: {} entities, final loss {:.6} -> {}",
        outcome.model.len(),
        last,
        out.display()
    );
    Ok(())
}

/// Re-ranks retrieval rows image by image with the context blend.
pub fn run_rerank(
    retrieval: &Path,
    queries: &Path,
    context: &Path,
    config: &RerankConfig,
    out: &Path,
) -> Result<()> {
    let matrix = named(retrieval, load_retrieval(retrieval))?;
    let queries = named(queries, load_queries(queries))?;
    let model = named(context, load_context(context))?;
    let reranked = rerank_grouped(&matrix, &queries, &model, config)?;
    ensure_parent(out)?;
    save_reranked(out, &reranked)?;
    println!(
        "rerank: {} rows, alpha={}, k_out={} -> {}",
        reranked.len(),
        config.alpha,
        config.k_out,
        out.display()
    );
    Ok(())
}

/// Scores ranked results against the query roster and writes the report.
pub fn run_eval(
    results: &Path,
    reranked: bool,
    queries: &Path,
    ks: &[usize],
    out: &Path,
) -> Result<()> {
    let queries = named(queries, load_queries(queries))?;
    let report = if reranked {
        evaluate(&named(results, load_reranked(results))?, &queries, ks)?
    } else {
        evaluate(&named(results, load_retrieval(results))?, &queries, ks)?
    };
    ensure_parent(out)?;
    write_report(out, &report)?;
    print!("{}", format_table(&report));
    Ok(())
}

/// Runs every stage in order, each consuming the previous stage's files.
pub fn run_pipeline(settings: &Settings) -> Result<()> {
    println!("[1/9] synth");
    run_synth(settings, false)?;
    println!("[2/9] validate");
    run_validate(
        &settings.catalog_path(),
        &settings.identities_path(),
        &settings.queries_path(),
        &settings.designs_path(),
    )?;
    println!("[3/9] whiten");
    run_whiten(
        &settings.identities_path(),
        settings.epsilon,
        &settings.zca_path(),
        &[
            (settings.identities_path(), settings.whitened_identities_path()),
            (settings.instances_path(), settings.whitened_instances_path()),
        ],
    )?;
    println!("[4/9] cluster");
    run_cluster(
        &settings.whitened_identities_path(),
        &settings.catalog_path(),
        settings.k_attributes,
        &settings.attributes_stem(),
        settings.seed,
    )?;
    println!("[5/9] train-embed");
    run_train_embed(
        &settings.whitened_instances_path(),
        &settings.whitened_identities_path(),
        &settings.queries_path(),
        &settings.attributes_stem(),
        &settings.checkpoint_stem(),
        &TrainConfig {
            loss_ratio: settings.loss_ratio,
            learning_rate: settings.learning_rate,
            epochs: settings.epochs,
            batch_size: settings.batch_size,
            seed: settings.seed,
            embed_dim: settings.embed_dim,
            fusion: settings.fusion,
            ..Default::default()
        },
    )?;
    println!("[6/9] search");
    run_search(
        &settings.whitened_identities_path(),
        &settings.catalog_path(),
        &settings.whitened_instances_path(),
        &settings.queries_path(),
        settings.k_search,
        &settings.retrieval_path(),
        false,
        Some((
            settings.checkpoint_stem().as_path(),
            ProjectionOutputs {
                identities_out: settings.projected_identities_path(),
                instances_out: settings.projected_instances_path(),
            },
        )),
    )?;
    println!("[7/9] train-context");
    run_train_context(
        &settings.designs_path(),
        &settings.context_path(),
        &ContextTrainConfig {
            dim: settings.context_dim,
            margin: settings.margin,
            negatives: settings.negatives,
            learning_rate: settings.context_learning_rate,
            epochs: settings.context_epochs,
            seed: settings.seed,
        },
    )?;
    println!("[8/9] rerank");
    run_rerank(
        &settings.retrieval_path(),
        &settings.queries_path(),
        &settings.context_path(),
        &RerankConfig {
            alpha: settings.alpha,
            k_out: settings.k_search,
            ..Default::default()
        },
        &settings.reranked_path(),
    )?;
    println!("[9/9] eval");
    println!("before rerank:");
    run_eval(
        &settings.retrieval_path(),
        false,
        &settings.queries_path(),
        &settings.top_ks,
        &settings.report_before_path(),
    )?;
    println!("after rerank:");
    run_eval(
        &settings.reranked_path(),
        true,
        &settings.queries_path(),
        &settings.top_ks,
        &settings.report_after_path(),
    )?;
    Ok(())
}

/// Prints a short summary of any canonical artifact without loading the
/// whole payload into memory.
pub fn run_describe(path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "emb" => describe_embeddings(path),
        "jsonl" => describe_jsonl(path),
        "json" | "meta" => describe_json(path),
        other => Err(Error::Format(format!(
            "unrecognized artifact extension {other:?} for {}",
            path.display()
        ))
        .into()),
    }
}

fn describe_embeddings(path: &Path) -> Result<()> {
    let mut reader = BufReader::new(named(path, File::open(path).map_err(Error::from))?);
    let mut header = [0u8; 12];
    reader.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
    if header[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {EMBEDDING_MAGIC:?}",
            &header[..4]
        ))
        .into());
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap());
    println!("embeddings: {rows} x {dim}");
    Ok(())
}

fn describe_jsonl(path: &Path) -> Result<()> {
    let reader = BufReader::new(named(path, File::open(path).map_err(Error::from))?);
    let mut kind: Option<&str> = None;
    let mut lines = 0usize;
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    let mut images: std::collections::BTreeSet<String> = Default::default();
    let mut min_items = usize::MAX;
    let mut max_items = 0usize;
    let mut width = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        let object = value
            .as_object()
            .ok_or_else(|| Error::Parse { line: idx + 1, message: "expected an object".into() })?;
        let this = if object.contains_key("image_id") {
            "queries"
        } else if object.contains_key("design_id") {
            "design sets"
        } else if object.contains_key("distances") {
            "retrieval"
        } else if object.contains_key("source_columns") {
            "reranked"
        } else if object.contains_key("category") {
            "catalog"
        } else if object.contains_key("attribute") {
            "attribute labels"
        } else {
            return Err(Error::Format(format!("unrecognized record on line {}", idx + 1)).into());
        };
        match kind {
            None => kind = Some(this),
            Some(k) if k == this => {}
            Some(k) => {
                return Err(Error::Format(format!(
                    "mixed record kinds: {k} then {this} on line {}",
                    idx + 1
                ))
                .into())
            }
        }
        lines += 1;
        match this {
            "catalog" => {
                let category = object["category"].as_str().unwrap_or("?").to_string();
                *per_category.entry(category).or_insert(0) += 1;
            }
            "queries" => {
                if let Some(img) = object["image_id"].as_str() {
                    images.insert(img.to_string());
                }
            }
            "design sets" => {
                let n = object["items"].as_array().map(Vec::len).unwrap_or(0);
                min_items = min_items.min(n);
                max_items = max_items.max(n);
            }
            "retrieval" | "reranked" => {
                let n = object["candidates"].as_array().map(Vec::len).unwrap_or(0);
                width = width.max(n);
            }
            _ => {}
        }
    }
    match kind {
        None => Err(Error::Format("empty file".into()).into()),
        Some("catalog") => {
            println!("catalog: {lines} identities in {} categories", per_category.len());
            for (category, count) in &per_category {
                println!("  {category}: {count}");
            }
            Ok(())
        }
        Some("queries") => {
            println!("queries: {lines} instances across {} images", images.len());
            Ok(())
        }
        Some("design sets") => {
            println!("design sets: {lines} (items {min_items}..{max_items})");
            Ok(())
        }
        Some(k @ ("retrieval" | "reranked")) => {
            println!("{k}: {lines} rows, k={width}");
            Ok(())
        }
        Some(k) => {
            println!("{k}: {lines} records");
            Ok(())
        }
    }
}

fn describe_json(path: &Path) -> Result<()> {
    let file = named(path, File::open(path).map_err(Error::from))?;
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(e.to_string()))?;
    let object = value.as_object().ok_or_else(|| Error::Format("expected an object".into()))?;
    if object.contains_key("set_acc") && object.contains_key("macc") {
        let ks = object["ks"].clone();
        println!("eval report: ks {ks}, macc {}, set {}", object["macc"], object["set_acc"]);
    } else if object.contains_key("attribute_of") {
        let identities = object["attribute_of"].as_object().map(|m| m.len()).unwrap_or(0);
        println!("ground truth: {identities} identities with planted labels");
    } else if object.contains_key("epsilon") {
        println!("whitening metadata: dim {}, epsilon {}", object["dim"], object["epsilon"]);
    } else if object.contains_key("centroid_category") {
        let k = object["centroid_category"].as_array().map(Vec::len).unwrap_or(0);
        println!("attribute metadata: {k} centroids, dim {}", object["dim"]);
    } else if object.contains_key("input_dim") {
        println!(
            "checkpoint metadata: input {}, embedding {}, classes {}",
            object["input_dim"], object["embed_dim"], object["classes"]
        );
    } else {
        let keys: Vec<&str> = object.keys().map(String::as_str).collect();
        println!("json object: keys {keys:?}");
    }
    Ok(())
}
