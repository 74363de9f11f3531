//! Exhaustive descriptor retrieval and its metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::Descriptor;
use crate::data::OverlapLabels;
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::numerics::Tensor;

const UNIT_TOLERANCE: f64 = 1e-5;

/// Reference descriptors, one unit-norm row per id.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    ids: Vec<u64>,
    rows: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    ids: Vec<u64>,
}

impl DescriptorIndex {
    pub fn new(ids: Vec<u64>, descriptors: &[Descriptor]) -> Result<Self> {
        if ids.len() != descriptors.len() {
            return Err(Error::contract(format!(
                "{} ids for {} descriptors",
                ids.len(),
                descriptors.len()
            )));
        }
        let dim = descriptors.first().map_or(0, Descriptor::dim);
        let mut rows = Vec::with_capacity(dim * descriptors.len());
        for d in descriptors {
            if d.dim() != dim {
                return Err(Error::contract(format!("descriptor dim {} vs {dim}", d.dim())));
            }
            rows.extend_from_slice(d.values());
        }
        Self::from_rows(ids, dim, rows)
    }

    fn from_rows(ids: Vec<u64>, dim: usize, rows: Vec<f32>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::contract(format!("duplicate reference id {dup}")));
        }
        if rows.len() != dim * ids.len() {
            return Err(Error::dim(format!("{} values for {} rows of {dim}", rows.len(), ids.len())));
        }
        for (row, id) in rows.chunks(dim.max(1)).zip(&ids) {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::contract(format!("reference {id} has norm {norm}")));
            }
        }
        Ok(Self { dim, ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = IndexHeader {
            dim: self.dim,
            ids: self.ids.clone(),
        };
        let t = Tensor::from_vec(&[self.len(), self.dim], self.rows.clone())?;
        checkpoint::save(path, &header, &[("descriptors".to_string(), t)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = checkpoint::load::<IndexHeader>(path)?;
        let rows = file
            .get("descriptors")
            .ok_or_else(|| Error::Parse {
                field: "descriptors".into(),
                detail: "tensor missing from index file".into(),
            })?
            .data()
            .to_vec();
        Self::from_rows(file.config.ids, file.config.dim, rows)
    }
}

fn tie_order(a: &(f64, u64), b: &(f64, u64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Reference ids per query, nearest first; equal distances fall back to
/// ascending id.
pub fn rank_all(queries: &[Descriptor], index: &DescriptorIndex) -> Result<Vec<Vec<u64>>> {
    if let Some(q) = queries.iter().find(|q| q.dim() != index.dim()) {
        return Err(Error::contract(format!(
            "query dim {} does not match index dim {}",
            q.dim(),
            index.dim()
        )));
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut scored: Vec<(f64, u64)> = (0..index.len())
                .map(|i| (squared_distance(q.values(), index.row(i)), index.ids[i]))
                .collect();
            scored.sort_by(tie_order);
            scored.into_iter().map(|(_, id)| id).collect()
        })
        .collect())
}

fn check_lengths(rankings: &[Vec<u64>], labels: &[OverlapLabels]) -> Result<()> {
    if rankings.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} rankings for {} label sets",
            rankings.len(),
            labels.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::contract("no queries"));
    }
    Ok(())
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Share of queries with a positive among the first `k` results.
pub fn recall_at_k(rankings: &[Vec<u64>], labels: &[OverlapLabels], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("recall needs K >= 1"));
    }
    check_lengths(rankings, labels)?;
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|id| l.positives.contains(id)))
        .count();
    Ok(fraction(hits, rankings.len()))
}

/// `K` for recall at one percent of the reference set.
pub fn one_percent_k(n_ref: usize) -> usize {
    n_ref.div_ceil(100).max(1)
}

/// Share of queries whose first result is a positive or a semi-positive.
pub fn hit_rate(rankings: &[Vec<u64>], labels: &[OverlapLabels]) -> Result<f64> {
    check_lengths(rankings, labels)?;
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| {
            r.first()
                .is_some_and(|id| l.positives.contains(id) || l.semi_positives.contains(id))
        })
        .count();
    Ok(fraction(hits, rankings.len()))
}

/// Average precision of one ranking with semi-positives removed from it.
/// `None` when the query has no positive.
pub fn average_precision(ranking: &[u64], labels: &OverlapLabels) -> Option<f64> {
    if labels.positives.is_empty() {
        return None;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    let kept = ranking.iter().filter(|id| !labels.semi_positives.contains(id));
    for (rank, id) in kept.enumerate() {
        if labels.positives.contains(id) {
            found += 1;
            sum += found as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / labels.positives.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated: usize,
    /// Queries without any positive, left out of the mean.
    pub excluded: usize,
}

pub fn mean_average_precision(rankings: &[Vec<u64>], labels: &[OverlapLabels]) -> Result<MapSummary> {
    check_lengths(rankings, labels)?;
    let aps: Vec<f64> = rankings
        .iter()
        .zip(labels)
        .filter_map(|(r, l)| average_precision(r, l))
        .collect();
    let evaluated = aps.len();
    Ok(MapSummary {
        map: if evaluated == 0 { 0.0 } else { aps.iter().sum::<f64>() / evaluated as f64 },
        evaluated,
        excluded: rankings.len() - evaluated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Recall keyed by K.
    pub r_at: BTreeMap<usize, f64>,
    pub r_at_1pct: f64,
    pub hit_rate: f64,
    pub map: f64,
    pub n_queries: usize,
    pub map_excluded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

pub fn evaluate(rankings: &[Vec<u64>], labels: &[OverlapLabels], n_ref: usize, ks: &[usize]) -> Result<RetrievalReport> {
    let mut r_at = BTreeMap::new();
    for &k in ks {
        r_at.insert(k, recall_at_k(rankings, labels, k)?);
    }
    let m = mean_average_precision(rankings, labels)?;
    Ok(RetrievalReport {
        r_at,
        r_at_1pct: recall_at_k(rankings, labels, one_percent_k(n_ref))?,
        hit_rate: hit_rate(rankings, labels)?,
        map: m.map,
        n_queries: rankings.len(),
        map_excluded: m.excluded,
        config_hash: None,
        checkpoint_hash: None,
    })
}

/// Labels for one-to-one matched data: query `i` matches reference `ids[i]`.
pub fn matched_labels(ids: &[u64]) -> Vec<OverlapLabels> {
    ids.iter()
        .map(|&id| OverlapLabels {
            positives: vec![id],
            semi_positives: Vec::new(),
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
