//! Cosine ranking, Rank-K / mAP evaluation and k-reciprocal re-ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::check_unit_rows;
use crate::parallel;
use crate::tensor::{matmul_nt_raw, Tensor};

/// Cut-offs reported by [`evaluate`].
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Embedded candidates of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    embeddings: Tensor,
    identities: Vec<u32>,
    modality: Modality,
}

impl Gallery {
    pub fn new(embeddings: Tensor, identities: Vec<u32>, modality: Modality) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            return Err(Error::shape("gallery", embeddings.shape(), &[identities.len(), 0]));
        }
        if identities.is_empty() {
            return Err(Error::Contract("gallery is empty".into()));
        }
        if embeddings.rows() != identities.len() {
            return Err(Error::shape("gallery", embeddings.shape(), &[identities.len(), embeddings.cols()]));
        }
        check_unit_rows("gallery", &embeddings)?;
        Ok(Gallery {
            embeddings,
            identities,
            modality,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// How the Jaccard term enters the adjusted similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    /// `cos + weight·(1 − D_J)`
    #[default]
    Similarity,
    /// `cos + weight·D_J`, the literal reading of the formula.
    Distance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RerankConfig {
    pub k: usize,
    pub weight: f64,
    pub enabled: bool,
    /// Whether a gallery item counts among its own unimodal neighbours.
    pub include_self: bool,
    pub blend: Blend,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k: 5,
            weight: 0.05,
            enabled: true,
            include_self: false,
            blend: Blend::Similarity,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("rerank k must be at least 1".into()));
        }
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::Config(format!("rerank weight must be >= 0, got {}", self.weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToImage,
    ImageToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub rank_k: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub reranked: bool,
}

impl RetrievalReport {
    pub fn rank1(&self) -> f64 {
        self.rank_k.get(&1).copied().unwrap_or(f64::NAN)
    }
}

/// Gallery order for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

fn order_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Gallery indices by descending dot product, ties by ascending index.
pub fn rank_by_cosine(query: &[f64], gallery: &Gallery) -> Result<Ranking> {
    if query.len() != gallery.dim() {
        return Err(Error::shape("rank_by_cosine", &[query.len()], &[gallery.dim()]));
    }
    let scores = matmul_nt_raw(query, gallery.embeddings.data(), 1, query.len(), gallery.len());
    let indices = order_desc(&scores);
    let scores = indices.iter().map(|&i| scores[i]).collect();
    Ok(Ranking { indices, scores })
}

/// Per-row orderings of a score matrix.
pub fn rank_rows(scores: &Tensor) -> Vec<Vec<usize>> {
    let threads = parallel::thread_count();
    parallel::map_indexed(scores.rows(), threads, |i| order_desc(scores.row(i)))
}

/// `Q×G` cosine matrix.
pub fn cosine_matrix(queries: &Tensor, gallery: &Gallery) -> Result<Tensor> {
    if queries.shape().len() != 2 || queries.cols() != gallery.dim() {
        return Err(Error::shape("cosine_matrix", queries.shape(), &[queries.rows(), gallery.dim()]));
    }
    let (q, d, g) = (queries.rows(), gallery.dim(), gallery.len());
    Tensor::matrix(q, g, matmul_nt_raw(queries.data(), gallery.embeddings.data(), q, d, g))
}

fn check_rankings(rankings: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32]) -> Result<()> {
    if rankings.len() != query_ids.len() {
        return Err(Error::shape("rankings", &[rankings.len()], &[query_ids.len()]));
    }
    if rankings.is_empty() {
        return Err(Error::Contract("no queries to evaluate".into()));
    }
    for r in rankings {
        if r.len() != gallery_ids.len() || r.iter().any(|&i| i >= gallery_ids.len()) {
            return Err(Error::Contract(format!(
                "ranking does not cover the gallery of {} items",
                gallery_ids.len()
            )));
        }
    }
    Ok(())
}

fn percent(r: BigRational) -> BigRational {
    r * BigRational::from_integer(BigInt::from(100))
}

/// Rank-K as an exact fraction ×100.
pub fn rank_k_exact(rankings: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32], k: usize) -> Result<BigRational> {
    if k == 0 {
        return Err(Error::Config("Rank-K needs K >= 1".into()));
    }
    if k > gallery_ids.len() {
        return Err(Error::Config(format!("K = {k} exceeds the gallery size {}", gallery_ids.len())));
    }
    check_rankings(rankings, query_ids, gallery_ids)?;
    let hits = rankings
        .iter()
        .zip(query_ids)
        .filter(|(r, &q)| r[..k].iter().any(|&g| gallery_ids[g] == q))
        .count();
    Ok(percent(BigRational::new(BigInt::from(hits), BigInt::from(rankings.len()))))
}

pub fn rank_k(rankings: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32], k: usize) -> Result<f64> {
    Ok(to_f64(&rank_k_exact(rankings, query_ids, gallery_ids, k)?))
}

/// Mean average precision as an exact fraction ×100.
pub fn mean_ap_exact(rankings: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32]) -> Result<BigRational> {
    check_rankings(rankings, query_ids, gallery_ids)?;
    let mut total = BigRational::zero();
    for (qi, (r, &q)) in rankings.iter().zip(query_ids).enumerate() {
        let relevant = gallery_ids.iter().filter(|&&g| g == q).count();
        if relevant == 0 {
            return Err(Error::Protocol(format!(
                "query {qi} (identity {q}) has no relevant gallery item"
            )));
        }
        let mut hits = 0usize;
        let mut ap = BigRational::zero();
        for (pos, &g) in r.iter().enumerate() {
            if gallery_ids[g] == q {
                hits += 1;
                ap += BigRational::new(BigInt::from(hits), BigInt::from(pos + 1));
            }
        }
        total += ap / BigRational::from_integer(BigInt::from(relevant));
    }
    Ok(percent(total / BigRational::from_integer(BigInt::from(rankings.len()))))
}

pub fn mean_ap(rankings: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    Ok(to_f64(&mean_ap_exact(rankings, query_ids, gallery_ids)?))
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// The `k` highest-scoring indices of `row`, optionally skipping one.
pub fn top_k(row: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    order_desc(row).into_iter().filter(|&i| Some(i) != skip).take(k).collect()
}

/// `1 − |a∩b| / |a∪b|` over index sets.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    (union - inter) as f64 / union as f64
}

/// Neighbour sets used by the re-ranking: for every gallery item its `k`
/// nearest gallery items, and for every query its `k` nearest gallery items
/// under the given cross-modal scores.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSets {
    pub gallery: Vec<Vec<usize>>,
    pub queries: Vec<Vec<usize>>,
}

pub fn neighbor_sets(gallery: &Gallery, cosine: &Tensor, cfg: &RerankConfig) -> Result<NeighborSets> {
    cfg.validate()?;
    let (q, g) = (cosine.rows(), cosine.cols());
    if g != gallery.len() {
        return Err(Error::shape("k_reciprocal_rerank", cosine.shape(), &[q, gallery.len()]));
    }
    if cfg.k > q.min(g) {
        return Err(Error::Config(format!(
            "rerank k = {} out of range for {q} queries and {g} gallery items",
            cfg.k
        )));
    }
    let emb = gallery.embeddings();
    let unimodal = matmul_nt_raw(emb.data(), emb.data(), g, gallery.dim(), g);
    let threads = parallel::thread_count();
    let gallery_sets = parallel::map_indexed(g, threads, |j| {
        let skip = if cfg.include_self { None } else { Some(j) };
        top_k(&unimodal[j * g..(j + 1) * g], cfg.k, skip)
    });
    let query_sets = parallel::map_indexed(q, threads, |i| top_k(cosine.row(i), cfg.k, None));
    Ok(NeighborSets {
        gallery: gallery_sets,
        queries: query_sets,
    })
}

/// `Q×G` Jaccard distances between query and gallery neighbour sets.
pub fn jaccard_matrix(gallery: &Gallery, cosine: &Tensor, cfg: &RerankConfig) -> Result<Tensor> {
    let sets = neighbor_sets(gallery, cosine, cfg)?;
    let (q, g) = (cosine.rows(), cosine.cols());
    let rows = parallel::map_indexed(q, parallel::thread_count(), |i| {
        (0..g)
            .map(|j| jaccard_distance(&sets.gallery[j], &sets.queries[i]))
            .collect::<Vec<f64>>()
    });
    Tensor::matrix(q, g, rows.concat())
}

/// Cosine similarity adjusted by neighbourhood overlap.
pub fn k_reciprocal_rerank(queries: &Tensor, gallery: &Gallery, cosine: &Tensor, cfg: &RerankConfig) -> Result<Tensor> {
    if queries.shape().len() != 2 || queries.cols() != gallery.dim() {
        return Err(Error::shape("k_reciprocal_rerank", queries.shape(), &[queries.rows(), gallery.dim()]));
    }
    if cosine.shape() != [queries.rows(), gallery.len()] {
        return Err(Error::shape("k_reciprocal_rerank", cosine.shape(), &[queries.rows(), gallery.len()]));
    }
    let dj = jaccard_matrix(gallery, cosine, cfg)?;
    let data = cosine
        .data()
        .iter()
        .zip(dj.data())
        .map(|(&c, &d)| match cfg.blend {
            Blend::Similarity => c + cfg.weight * (1.0 - d),
            Blend::Distance => c + cfg.weight * d,
        })
        .collect();
    Tensor::matrix(cosine.rows(), cosine.cols(), data)
}

fn report(direction: Direction, scores: &Tensor, query_ids: &[u32], gallery_ids: &[u32], reranked: bool) -> Result<RetrievalReport> {
    let rankings = rank_rows(scores);
    let mut rank_k_map = BTreeMap::new();
    for k in REPORT_KS.into_iter().filter(|&k| k <= gallery_ids.len()) {
        rank_k_map.insert(k, rank_k(&rankings, query_ids, gallery_ids, k)?);
    }
    Ok(RetrievalReport {
        direction,
        rank_k: rank_k_map,
        map_score: mean_ap(&rankings, query_ids, gallery_ids)?,
        reranked,
    })
}

/// Plain and re-ranked reports for one direction.
pub fn evaluate_direction(
    direction: Direction,
    queries: &Gallery,
    gallery: &Gallery,
    cfg: &RerankConfig,
    rerank: bool,
) -> Result<Vec<RetrievalReport>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::shape("evaluate", &[queries.len(), queries.dim()], &[gallery.len(), gallery.dim()]));
    }
    let cosine = cosine_matrix(queries.embeddings(), gallery)?;
    let mut out = vec![report(direction, &cosine, queries.identities(), gallery.identities(), false)?];
    if rerank {
        let adjusted = k_reciprocal_rerank(queries.embeddings(), gallery, &cosine, cfg)?;
        out.push(report(direction, &adjusted, queries.identities(), gallery.identities(), true)?);
    }
    Ok(out)
}

/// Bidirectional evaluation: text→image plain, text→image re-ranked,
/// image→text plain, image→text re-ranked.
pub fn evaluate(texts: &Gallery, images: &Gallery, cfg: &RerankConfig) -> Result<Vec<RetrievalReport>> {
    if texts.modality() != Modality::Text || images.modality() != Modality::Image {
        return Err(Error::Config(format!(
            "evaluate expects text queries and an image gallery, got {:?} and {:?}",
            texts.modality(),
            images.modality()
        )));
    }
    let mut out = evaluate_direction(Direction::TextToImage, texts, images, cfg, true)?;
    out.extend(evaluate_direction(Direction::ImageToText, images, texts, cfg, true)?);
    Ok(out)
}

/// Rank-K for every `K` in `1..=max_k`, capped at the gallery size.
pub fn rank_curve(rankings: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32], max_k: usize) -> Result<Vec<f64>> {
    (1..=max_k.min(gallery_ids.len()))
        .map(|k| rank_k(rankings, query_ids, gallery_ids, k))
        .collect()
}

/// Labelled Rank-K curves in the order of [`evaluate`].
pub fn rank_curves(texts: &Gallery, images: &Gallery, cfg: &RerankConfig, max_k: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (label, queries, gallery) in [("text-to-image", texts, images), ("image-to-text", images, texts)] {
        let cosine = cosine_matrix(queries.embeddings(), gallery)?;
        let adjusted = k_reciprocal_rerank(queries.embeddings(), gallery, &cosine, cfg)?;
        for (suffix, scores) in [("", &cosine), (" reranked", &adjusted)] {
            let curve = rank_curve(&rank_rows(scores), queries.identities(), gallery.identities(), max_k)?;
            out.push((format!("{label}{suffix}"), curve));
        }
    }
    Ok(out)
}
