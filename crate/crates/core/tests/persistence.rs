//! Write→read→write round trips of every persisted format.

use std::collections::BTreeMap;

use cmmoco::config::{from_toml_str, to_toml_string, ExperimentConfig};
use cmmoco::io::{
    dataset_from_bytes, dataset_to_bytes, metrics_from_jsonl, metrics_to_jsonl, report_from_json, report_to_json,
    EvaluationReport, FeatureStore,
};
use cmmoco::retrieval::{Direction, Modality, RetrievalReport};
use cmmoco::synth_data::{generate_dataset, DataConfig};
use cmmoco::tensor::Tensor;
use cmmoco::train::EpochMetrics;
use proptest::prelude::*;

fn unit_matrix(rows: usize, cols: usize, raw: &[f64]) -> Tensor {
    let mut data = raw[..rows * cols].to_vec();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        row[0] += 2.0;
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_store_round_trips(
        rows in 1usize..12,
        cols in 1usize..10,
        raw in prop::collection::vec(-1.0f64..1.0, 120),
        ids in prop::collection::vec(any::<u32>(), 12),
        text in any::<bool>(),
    ) {
        let modality = if text { Modality::Text } else { Modality::Image };
        let store = FeatureStore::from_embeddings(modality, &unit_matrix(rows, cols, &raw), ids[..rows].to_vec()).unwrap();
        let bytes = store.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 15 + 4 * rows * cols + 4 * rows);
        let back = FeatureStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let gallery = back.to_gallery().unwrap();
        prop_assert_eq!(gallery.identities(), &ids[..rows]);
    }

    #[test]
    fn dataset_round_trips(
        n_ids in 3usize..10,
        images_per_id in 1usize..3,
        captions_per_image in 1usize..3,
        fillers in 0usize..3,
        sigma in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let ds = generate_dataset(&DataConfig {
            n_ids,
            n_train_ids: n_ids - 2,
            n_val_ids: 1,
            images_per_id,
            captions_per_image,
            slots: 3,
            choices: 4,
            noise_sigma: sigma,
            fillers_per_caption: fillers,
            filler_vocab: 5,
            seed,
            ..DataConfig::default()
        })
        .unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        let back = dataset_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(dataset_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn config_round_trips(
        epochs in 1usize..100,
        lr in 1e-6f64..1.0,
        momentum in 0.0f64..1.0,
        queue in 0usize..4096,
        tau in 0.01f64..1.0,
        sigma in 0.0f64..1.0,
        seed in any::<u32>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epochs = epochs;
        cfg.train.warmup_epochs = 0;
        cfg.train.decay_epochs = vec![];
        cfg.train.base_lr = lr;
        cfg.train.momentum = momentum;
        cfg.train.queue_capacity = if queue < cfg.train.sampler.batch_size() { 0 } else { queue };
        cfg.train.cmc.tau_c = tau;
        cfg.train.seed = u64::from(seed);
        cfg.data.noise_sigma = sigma;
        let text = to_toml_string(&cfg);
        let back = from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(to_toml_string(&back), text);
    }

    #[test]
    fn metrics_log_round_trips(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 6 * 5)) {
        let trace: Vec<EpochMetrics> = values
            .chunks(6)
            .enumerate()
            .map(|(epoch, v)| EpochMetrics { epoch, lcmc: v[0], lalign: v[1], lid: v[2], total: v[3], val_rank1: v[4], lr: v[5] })
            .collect();
        let text = metrics_to_jsonl(&trace).unwrap();
        prop_assert_eq!(text.lines().count(), trace.len());
        let back = metrics_from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &trace);
        prop_assert_eq!(metrics_to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn report_round_trips(r1 in 0.0f64..100.0, r5 in 0.0f64..100.0, map in 0.0f64..100.0, w in 0.0f64..1.0) {
        let rank_k: BTreeMap<usize, f64> = [(1, r1), (5, r5)].into_iter().collect();
        let report = EvaluationReport {
            query_count: 7,
            gallery_count: 9,
            rerank_k: 3,
            rerank_weight: w,
            reports: vec![
                RetrievalReport { direction: Direction::TextToImage, rank_k: rank_k.clone(), map_score: map, reranked: false },
                RetrievalReport { direction: Direction::ImageToText, rank_k, map_score: map / 2.0, reranked: true },
            ],
        };
        let text = report_to_json(&report).unwrap();
        let back = report_from_json(&text).unwrap();
        prop_assert_eq!(&back, &report);
        prop_assert_eq!(report_to_json(&back).unwrap(), text);
    }
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    let ds = generate_dataset(&DataConfig::default()).unwrap();
    let bytes = dataset_to_bytes(&ds).unwrap();
    for cut in [0, 3, 4, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(dataset_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(dataset_from_bytes(&extra).is_err());
    assert!(FeatureStore::from_bytes(&bytes).is_err());
}
