//! Neighbour-based embedding metrics, ROC AUC, the FLOPs counting model,
//! throughput measurement and report serialization.

mod bench;
mod flops;
mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use bench::{throughput_bench, ThroughputResult};
pub use flops::{flops_breakdown, flops_estimate, FlopsBreakdown, FLOPS_FORMULA_SHEET};
pub use report::{config_digest, write_csv, write_jsonl, MetricsReport, RECALL_DEFINITION};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Scalar, Tensor};

/// Cap on the per-anchor neighbourhood size.
pub const MAX_K: usize = 32;

fn check_labels<T: Scalar>(emb: &Tensor<T>, labels: &[i64]) -> Result<()> {
    if emb.ndim() != 2 || emb.rows() != labels.len() {
        return shape_err("metrics", format!("embeddings {:?}, {} labels", emb.shape(), labels.len()));
    }
    Ok(())
}

/// The `k` nearest neighbours of `u` by L2 distance, ties broken by index,
/// excluding `u` itself.
pub fn nearest<T: Scalar>(emb: &Tensor<T>, u: usize, k: usize) -> Vec<usize> {
    let q = emb.row(u);
    let mut d: Vec<(f64, usize)> = (0..emb.rows())
        .filter(|&v| v != u)
        .map(|v| {
            let s: f64 = emb.row(v).iter().zip(q).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
            (s, v)
        })
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, by);
        d.truncate(k);
    }
    d.sort_unstable_by(by);
    d.into_iter().map(|(_, v)| v).collect()
}

fn cluster_sizes(labels: &[i64]) -> BTreeMap<i64, usize> {
    let mut sizes = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l >= 0) {
        *sizes.entry(l).or_insert(0) += 1;
    }
    sizes
}

/// `min(cluster size - 1, 32)` for a non-noise anchor.
pub fn default_k(labels: &[i64], u: usize) -> usize {
    let size = labels.iter().filter(|&&l| l == labels[u]).count();
    (size - 1).min(MAX_K)
}

/// Fraction of `u`'s `k` nearest neighbours sharing its label; `k` defaults
/// to [`default_k`].
pub fn prec_at_k<T: Scalar>(emb: &Tensor<T>, labels: &[i64], u: usize, k: Option<usize>) -> Result<f64> {
    check_labels(emb, labels)?;
    let n = labels.len();
    if u >= n {
        return Err(Error::InvalidArgument(format!("anchor {u} of {n}")));
    }
    let k = k.unwrap_or_else(|| default_k(labels, u));
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("need 0 < k < n, got k={k}, n={n}")));
    }
    let hits = nearest(emb, u, k).into_iter().filter(|&v| labels[v] == labels[u]).count();
    Ok(hits as f64 / k as f64)
}

/// Anchors that have a defined precision: non-noise with at least one
/// same-label partner.
fn anchors(labels: &[i64]) -> Vec<usize> {
    let sizes = cluster_sizes(labels);
    (0..labels.len()).filter(|&u| labels[u] >= 0 && sizes[&labels[u]] >= 2).collect()
}

/// Mean Prec@k over every non-noise hit whose particle left at least two hits.
pub fn accuracy<T: Scalar>(emb: &Tensor<T>, labels: &[i64]) -> Result<f64> {
    check_labels(emb, labels)?;
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("accuracy needs at least two points".into()));
    }
    let us = anchors(labels);
    if us.is_empty() {
        return Err(Error::InvalidArgument("no non-noise anchors".into()));
    }
    let precs: Vec<f64> = us
        .par_iter()
        .map(|&u| prec_at_k(emb, labels, u, None))
        .collect::<Result<_>>()?;
    Ok(precs.iter().sum::<f64>() / precs.len() as f64)
}

/// Per-cluster retrieval: for each particle with at least two hits, the
/// fraction of its hits appearing in the union of its members' `k`-nearest
/// neighbourhoods (members count as retrieved when another member finds
/// them); the mean over clusters.
pub fn recall<T: Scalar>(emb: &Tensor<T>, labels: &[i64]) -> Result<f64> {
    check_labels(emb, labels)?;
    let sizes = cluster_sizes(labels);
    let clusters: Vec<(i64, usize)> = sizes.into_iter().filter(|&(_, s)| s >= 2).collect();
    if clusters.is_empty() {
        return Err(Error::InvalidArgument("no cluster with at least two hits".into()));
    }
    let scores: Vec<f64> = clusters
        .par_iter()
        .map(|&(c, size)| {
            let members: Vec<usize> = (0..labels.len()).filter(|&u| labels[u] == c).collect();
            let k = (size - 1).min(MAX_K);
            let mut found = vec![false; labels.len()];
            for &u in &members {
                for v in nearest(emb, u, k) {
                    found[v] = true;
                }
            }
            members.iter().filter(|&&u| found[u]).count() as f64 / size as f64
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err("roc_auc", format!("{} scores, {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "roc_auc" });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("roc_auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[cfg(test)]
mod tests;
