//! Cross-module flows on generated corpora: retrieval end to end,
//! context re-ranking recovery, and whole-chain determinism.

use std::collections::{BTreeMap, HashMap};

use fsr_core::attributes::{allocate_cluster_budget, cluster_attributes, ClusterParams};
use fsr_core::context::{train_context_model, ContextTrainConfig};
use fsr_core::embednet::{train_embedding_model, TrainConfig};
use fsr_core::eval::{evaluate, EvalReport};
use fsr_core::index::SearchIndex;
use fsr_core::rerank::{rerank_grouped, RerankConfig};
use fsr_core::synth::{generate_context_fixture, generate_synthetic_dataset, SynthConfig};
use fsr_core::whiten::{apply_zca, fit_zca, l2_normalize};

fn set_acc_at(report: &EvalReport, k: usize) -> f64 {
    let pos = report.ks.iter().position(|&x| x == k).expect("k present");
    report.set_acc[pos]
}

#[test]
fn context_rerank_recovers_buried_ground_truth() {
    let data = generate_context_fixture(5).unwrap();
    let index = SearchIndex::build(&data.identities, &data.catalog).unwrap();
    let outcome = index.batch_search(&data.instances, None, 10).unwrap();
    assert!(outcome.row_errors.is_empty());
    let ks = [1usize, 5, 10];
    let before = evaluate(&outcome.matrix, &data.queries, &ks).unwrap();
    // One all-easy image per group of four; the rest hold ambiguous
    // instances whose ground truth sits below rank 5.
    assert_eq!(set_acc_at(&before, 5), 0.25);

    let trained = train_context_model(
        &data.designs,
        &ContextTrainConfig { dim: 32, epochs: 60, seed: 3, ..Default::default() },
    )
    .unwrap();
    let config = RerankConfig { alpha: 0.5, k_out: 10, ..Default::default() };
    let reranked =
        rerank_grouped(&outcome.matrix, &data.queries, &trained.model, &config).unwrap();
    let after = evaluate(&reranked, &data.queries, &ks).unwrap();

    let gain = set_acc_at(&after, 5) / set_acc_at(&before, 5);
    assert!(gain >= 1.1, "relative set accuracy gain {gain}");
    // Never worse than one image at the default blend.
    assert!(
        set_acc_at(&after, 5) >= set_acc_at(&before, 5) - 1.0 / before.images_evaluated as f64
    );
}

#[test]
fn constrained_clustering_decomposes_per_category() {
    let data = generate_synthetic_dataset(&SynthConfig {
        categories: 3,
        identities_per_category: 20,
        attributes_per_category: 4,
        dim: 8,
        seed: 17,
        ..Default::default()
    })
    .unwrap();
    let params = ClusterParams { seed: 9, ..Default::default() };
    let budget: BTreeMap<String, usize> =
        (0..3).map(|c| (format!("cat_{c:02}"), 4)).collect();
    let joint = cluster_attributes(&data.identities, &data.catalog, &budget, &params).unwrap();

    // Category constraints make the joint problem separable: solving one
    // category alone must reproduce that category's slice of the joint
    // solution exactly, labels and centroids alike.
    let mut offset = 0usize;
    for cat in budget.keys() {
        let rows: Vec<usize> = (0..data.identities.len())
            .filter(|&r| data.catalog.category_of(data.identities.id(r)) == Some(cat))
            .collect();
        let ids: Vec<String> = rows.iter().map(|&r| data.identities.id(r).to_string()).collect();
        let sub_data: Vec<f32> =
            rows.iter().flat_map(|&r| data.identities.row(r).iter().copied()).collect();
        let sub = fsr_core::ingest::EmbeddingMatrix::new(ids.clone(), 8, sub_data).unwrap();
        let sub_catalog = fsr_core::ingest::Catalog::new(
            data.catalog
                .entries()
                .iter()
                .filter(|e| &e.category == cat)
                .cloned()
                .collect(),
        )
        .unwrap();
        let solo_budget: BTreeMap<String, usize> = [(cat.clone(), budget[cat])].into();
        let solo = cluster_attributes(&sub, &sub_catalog, &solo_budget, &params).unwrap();
        for id in &ids {
            assert_eq!(solo.labels[id], joint.labels[id] - offset, "identity {id}");
        }
        for k in 0..budget[cat] {
            assert_eq!(solo.centroid(k), joint.centroid(offset + k), "centroid {k} of {cat}");
        }
        offset += budget[cat];
    }
}

#[test]
fn full_chain_is_deterministic_end_to_end() {
    let run = || {
        let data = generate_synthetic_dataset(&SynthConfig {
            categories: 3,
            identities_per_category: 10,
            attributes_per_category: 2,
            dim: 8,
            instance_noise_sigma: 0.05,
            instances_per_identity: 3,
            context_groups: 3,
            designs: 15,
            seed: 42,
        })
        .unwrap();

        let zca = fit_zca(&data.identities, 1e-5).unwrap();
        let white_ident = apply_zca(&zca, &data.identities).unwrap();
        let white_inst = apply_zca(&zca, &data.instances).unwrap();

        let budget = allocate_cluster_budget(&data.catalog, 6).unwrap();
        let attributes = cluster_attributes(
            &white_ident,
            &data.catalog,
            &budget,
            &ClusterParams { seed: 1, ..Default::default() },
        )
        .unwrap();

        let gt: HashMap<String, String> = data
            .queries
            .queries()
            .iter()
            .map(|q| (q.instance_id.clone(), q.gt.clone()))
            .collect();
        let trained = train_embedding_model(
            &white_inst,
            &white_ident,
            &gt,
            &attributes,
            &TrainConfig { epochs: 3, embed_dim: Some(8), seed: 5, ..Default::default() },
        )
        .unwrap();
        let projector = trained.projection.quantized();
        let (ident_emb, _) = l2_normalize(&projector.project_matrix(&white_ident).unwrap());
        let (inst_emb, _) = l2_normalize(&projector.project_matrix(&white_inst).unwrap());

        let index = SearchIndex::build(&ident_emb, &data.catalog).unwrap();
        let outcome = index.batch_search(&inst_emb, None, 10).unwrap();
        assert!(outcome.row_errors.is_empty());

        let context = train_context_model(
            &data.designs,
            &ContextTrainConfig { dim: 16, epochs: 10, seed: 2, ..Default::default() },
        )
        .unwrap();
        let reranked = rerank_grouped(
            &outcome.matrix,
            &data.queries,
            &context.model,
            &RerankConfig { alpha: 0.5, k_out: 10, ..Default::default() },
        )
        .unwrap();
        let before = evaluate(&outcome.matrix, &data.queries, &[1, 5, 10]).unwrap();
        let after = evaluate(&reranked, &data.queries, &[1, 5, 10]).unwrap();
        (
            serde_json::to_string(&before).unwrap(),
            serde_json::to_string(&after).unwrap(),
        )
    };

    let (before_a, after_a) = run();
    let (before_b, after_b) = run();
    assert_eq!(before_a, before_b);
    assert_eq!(after_a, after_b);
}
