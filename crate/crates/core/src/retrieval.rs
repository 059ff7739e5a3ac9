//! Image-to-video retrieval: embed gallery videos from their intact bags,
//! rank them by squared l2 distance to an embedded query image and score
//! rankings with mAP@K.
//!
//! AP@K for a query with `R` relevant gallery items is
//! `(1 / min(R, K)) · Σ_{j ≤ K} Prec(j) · rel(j)`; mAP@K averages over
//! queries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, ProposalBag, Split};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub id: usize,
    pub label: usize,
    pub embedding: Vec<f64>,
}

/// Embedded gallery videos. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let dim = first.embedding.len();
            if let Some(bad) = entries.iter().find(|e| e.embedding.len() != dim) {
                return Err(Error::dims("gallery embedding", dim, bad.embedding.len()));
            }
        }
        let mut ids: Vec<usize> = entries.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("duplicate gallery id {}", w[0])));
        }
        Ok(GalleryIndex { entries })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Embeds `(id, label, bag)` triples with the full bag and the model's
/// proposal weighting.
pub fn embed_gallery<'a>(
    videos: impl IntoIterator<Item = (usize, usize, &'a ProposalBag)>,
    model: &ModelState,
) -> Result<GalleryIndex> {
    let videos: Vec<_> = videos.into_iter().collect();
    let entries = videos
        .par_iter()
        .map(|&(id, label, bag)| {
            Ok(GalleryEntry {
                id,
                label,
                embedding: model.embed_bag(bag.features(), bag.adjacency())?.pooled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GalleryIndex::new(entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: usize,
    pub distance: f64,
    pub relevant: bool,
}

/// Full ranking of the gallery for one query, nearest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: usize,
    pub label: usize,
    pub ranking: Vec<Ranked>,
}

impl RankedResult {
    pub fn relevance(&self) -> Vec<bool> {
        self.ranking.iter().map(|r| r.relevant).collect()
    }

    pub fn total_relevant(&self) -> usize {
        self.ranking.iter().filter(|r| r.relevant).count()
    }
}

/// Ranks the gallery by `‖query − Z‖²`, ties broken by gallery id.
pub fn rank_embedded(query: usize, label: usize, embedding: &[f64], index: &GalleryIndex) -> Result<RankedResult> {
    if index.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let dim = index.entries[0].embedding.len();
    if embedding.len() != dim {
        return Err(Error::dims("query embedding", dim, embedding.len()));
    }
    let mut ranking: Vec<Ranked> = index
        .entries
        .iter()
        .map(|e| Ranked {
            id: e.id,
            distance: numerics::squared_distance(embedding, &e.embedding),
            relevant: e.label == label,
        })
        .collect();
    ranking.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    Ok(RankedResult { query, label, ranking })
}

/// Embeds a raw image and ranks the gallery against it.
pub fn rank_query(query: usize, label: usize, image: &[f64], index: &GalleryIndex, model: &ModelState) -> Result<RankedResult> {
    rank_embedded(query, label, &model.embed_image(image)?, index)
}

/// AP@K of one ranking, `relevance` nearest first. `total_relevant` is `R`.
pub fn average_precision(relevance: &[bool], total_relevant: usize, k: usize) -> Option<f64> {
    if total_relevant == 0 || k == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    Some(sum / total_relevant.min(k) as f64)
}

/// Mean AP@K over `results`.
pub fn map_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(Error::InvalidConfig("no queries to evaluate".into()));
    }
    let mut sum = 0.0;
    for r in results {
        sum += average_precision(&r.relevance(), r.total_relevant(), k).ok_or(Error::NoRelevantItems { query: r.query })?;
    }
    Ok(sum / results.len() as f64)
}

/// Ranks every image of `split` against the videos of the same split. Ids
/// are pair positions in the dataset.
pub fn rank_split(model: &ModelState, dataset: &PairedDataset, split: Split) -> Result<Vec<RankedResult>> {
    let indices = dataset.indices(split);
    let index = embed_gallery(
        indices.iter().map(|&i| (i, dataset.pairs[i].label, &dataset.pairs[i].video)),
        model,
    )?;
    indices
        .par_iter()
        .map(|&i| {
            let p = &dataset.pairs[i];
            rank_query(i, p.label, &p.image, &index, model)
        })
        .collect()
}

/// mAP at each requested K, with K clipped to the gallery size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub requested_k: usize,
    pub k: usize,
    pub map: f64,
}

pub fn map_table(results: &[RankedResult], ks: &[usize]) -> Result<Vec<MapScore>> {
    let gallery = results.first().map_or(0, |r| r.ranking.len());
    ks.iter()
        .map(|&requested_k| {
            let k = requested_k.min(gallery).max(1);
            Ok(MapScore {
                requested_k,
                k,
                map: map_at_k(results, k)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ExportRecord {
    query: usize,
    label: usize,
    ap: Option<f64>,
    ranked: Vec<usize>,
    distances: Vec<f64>,
}

/// One JSON object per query: query id, label, AP@K, and the top-K gallery
/// ids with their distances.
pub fn export_jsonl(results: &[RankedResult], k: usize) -> String {
    let mut out = String::new();
    for r in results {
        let top = &r.ranking[..k.min(r.ranking.len())];
        let rec = ExportRecord {
            query: r.query,
            label: r.label,
            ap: average_precision(&r.relevance(), r.total_relevant(), k),
            ranked: top.iter().map(|x| x.id).collect(),
            distances: top.iter().map(|x| x.distance).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    out
}
