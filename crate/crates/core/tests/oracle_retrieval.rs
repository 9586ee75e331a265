//! Retrieval through hand-built encoders that read the attributes straight
//! off the records. Noise-free data must then be retrieved perfectly.

use cmmoco::retrieval::{evaluate, Direction, Gallery, Modality, RerankConfig};
use cmmoco::synth_data::{generate_dataset, DataConfig, Dataset, Split};
use cmmoco::tensor::Tensor;

/// One-hot attribute blocks scaled to unit norm.
fn attribute_embedding(cfg: &DataConfig, attrs: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; cfg.slots * cfg.choices];
    let scale = 1.0 / (cfg.slots as f64).sqrt();
    for (slot, &c) in attrs.iter().enumerate() {
        v[slot * cfg.choices + c] = scale;
    }
    v
}

fn image_attributes(cfg: &DataConfig, feature: &[f64]) -> Vec<usize> {
    feature
        .chunks(cfg.choices)
        .map(|block| {
            (0..block.len())
                .max_by(|&a, &b| block[a].total_cmp(&block[b]))
                .unwrap()
        })
        .collect()
}

fn caption_attributes(cfg: &DataConfig, tokens: &[u32]) -> Vec<usize> {
    let mut attrs = vec![0; cfg.slots];
    for &t in tokens {
        let t = t as usize;
        if t < cfg.slots * cfg.choices {
            attrs[t / cfg.choices] = t % cfg.choices;
        }
    }
    attrs
}

fn oracle_galleries(ds: &Dataset) -> (Gallery, Gallery) {
    let cfg = &ds.config;
    let dim = cfg.slots * cfg.choices;
    let images = ds.images_in(Split::Test);
    let captions = ds.captions_in(Split::Test);
    let img: Vec<f64> = images
        .iter()
        .flat_map(|&i| attribute_embedding(cfg, &image_attributes(cfg, &ds.images[i].feature)))
        .collect();
    let txt: Vec<f64> = captions
        .iter()
        .flat_map(|&c| attribute_embedding(cfg, &caption_attributes(cfg, &ds.captions[c].tokens)))
        .collect();
    let texts = Gallery::new(
        Tensor::matrix(captions.len(), dim, txt).unwrap(),
        captions.iter().map(|&c| ds.captions[c].identity).collect(),
        Modality::Text,
    )
    .unwrap();
    let images = Gallery::new(
        Tensor::matrix(images.len(), dim, img).unwrap(),
        images.iter().map(|&i| ds.images[i].identity).collect(),
        Modality::Image,
    )
    .unwrap();
    (texts, images)
}

#[test]
fn attribute_tokens_come_first_in_the_vocabulary() {
    let cfg = DataConfig::default();
    assert_eq!(cfg.attribute_token(0, 0), 0);
    assert_eq!(cfg.attribute_token(cfg.slots - 1, cfg.choices - 1) as usize, cfg.slots * cfg.choices - 1);
}

#[test]
fn noise_free_oracle_retrieval_is_perfect() {
    let ds = generate_dataset(&DataConfig {
        noise_sigma: 0.0,
        ..DataConfig::default()
    })
    .unwrap();
    let (texts, images) = oracle_galleries(&ds);
    let reports = evaluate(&texts, &images, &RerankConfig::default()).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        for (k, v) in &r.rank_k {
            assert_eq!(*v, 100.0, "{:?} reranked={} rank-{k}", r.direction, r.reranked);
        }
        assert_eq!(r.map_score, 100.0);
    }
    assert_eq!(reports[0].direction, Direction::TextToImage);
}

#[test]
fn default_noise_still_decodes_every_image() {
    let ds = generate_dataset(&DataConfig::default()).unwrap();
    for img in &ds.images {
        let attrs: Vec<usize> = ds.identities[img.identity as usize].attributes.iter().map(|&a| a as usize).collect();
        assert_eq!(image_attributes(&ds.config, &img.feature), attrs);
    }
    for cap in &ds.captions {
        let attrs: Vec<usize> = ds.identities[cap.identity as usize].attributes.iter().map(|&a| a as usize).collect();
        assert_eq!(caption_attributes(&ds.config, &cap.tokens), attrs);
    }
}
