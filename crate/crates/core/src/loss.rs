//! InfoNCE over RBF similarities with kNN pairs, and focal loss.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{logsumexp, sigmoid, softplus, Scalar, Tape, Tensor, Var};

/// `exp(-‖u - v‖² / (2σ²))`.
pub fn rbf_similarity<T: Scalar>(h_u: &[T], h_v: &[T], sigma: T) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if h_u.len() != h_v.len() {
        return shape_err("rbf_similarity", format!("{} vs {}", h_u.len(), h_v.len()));
    }
    let d2: T = h_u.iter().zip(h_v).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (T::lit(2.0) * sigma * sigma)).exp())
}

/// `-log(e^{s+} / (e^{s+} + Σ e^{s-}))`.
pub fn info_nce<T: Scalar>(sim_pos: T, sim_negs: &[T]) -> Result<T> {
    if !sim_pos.is_finite() || sim_negs.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "info_nce" });
    }
    let all = std::iter::once(sim_pos).chain(sim_negs.iter().copied());
    Ok((logsumexp(all) - sim_pos).max(T::zero()))
}

/// `-α_t (1 - p_t)^λ log p_t`, with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss<T: Scalar>(p: T, y: bool, alpha: T, lambda: T) -> T {
    let eps = T::lit(1e-7);
    let p = p.max(eps).min(T::one() - eps);
    let (pt, at) = if y { (p, alpha) } else { (T::one() - p, T::one() - alpha) };
    -at * (T::one() - pt).powf(lambda) * pt.ln()
}

/// Positives and negatives of one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    /// Neighbourhood size for positives and the negative cap.
    pub k: usize,
    /// Nearest hits searched for negatives.
    pub pool_size: usize,
    /// Keep every negative in the pool instead of the nearest `k`.
    pub full_pool: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            k: 32,
            pool_size: 256,
            full_pool: false,
        }
    }
}

/// Indices of all other points sorted by `(squared distance, index)`.
pub fn neighbours_by_distance<T: Scalar>(emb: &Tensor<T>, u: usize) -> Vec<usize> {
    let n = emb.rows();
    let row = emb.row(u);
    let mut d: Vec<(T, usize)> = (0..n)
        .filter(|&v| v != u)
        .map(|v| {
            let s: T = row.iter().zip(emb.row(v)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            (s, v)
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, v)| v).collect()
}

/// One [`PairSet`] per non-noise anchor (label ≥ 0). Noise points can be
/// negatives but never anchors or positives.
pub fn build_pairs<T: Scalar>(emb: &Tensor<T>, labels: &[i64], cfg: &PairConfig) -> Result<Vec<PairSet>> {
    let n = emb.rows();
    if n <= 1 {
        return Err(Error::InvalidArgument(format!("need at least 2 points, got {n}")));
    }
    if labels.len() != n {
        return shape_err("build_pairs", format!("{} labels for {n} points", labels.len()));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut out = Vec::new();
    for u in 0..n {
        if labels[u] < 0 {
            continue;
        }
        let nb = neighbours_by_distance(emb, u);
        let positives = nb[..cfg.k.min(nb.len())]
            .iter()
            .copied()
            .filter(|&v| labels[v] == labels[u])
            .collect();
        let pool = &nb[..cfg.pool_size.min(nb.len())];
        let cap = if cfg.full_pool { usize::MAX } else { cfg.k };
        let negatives = pool.iter().copied().filter(|&v| labels[v] != labels[u]).take(cap).collect();
        out.push(PairSet {
            anchor: u,
            positives,
            negatives,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub sigma: f64,
    /// Similarities are divided by this before the softmax.
    pub temperature: f64,
    pub pairs: PairConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            temperature: 0.1,
            pairs: PairConfig::default(),
        }
    }
}

/// Batch InfoNCE on the tape: each anchor's loss is the mean over its
/// positives, the batch loss the mean over anchors with positives.
///
/// Returns `None` when no anchor has a positive.
pub fn info_nce_var<T: Scalar>(
    tape: &Tape<T>,
    emb: &Var<T>,
    pairs: &[PairSet],
    sigma: f64,
    temperature: f64,
) -> Result<Option<Var<T>>> {
    if !(sigma > 0.0) || !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma and temperature must be positive, got {sigma} and {temperature}"
        )));
    }
    let active: Vec<&PairSet> = pairs.iter().filter(|p| !p.positives.is_empty()).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let n = emb.rows();
    let (mut us, mut vs) = (Vec::new(), Vec::new());
    let mut groups = Vec::new();
    let mut term_w = Vec::new();
    let mut pos_w = Vec::new();
    let anchor_w = 1.0 / active.len() as f64;
    for p in &active {
        if p.anchor >= n || p.positives.iter().chain(&p.negatives).any(|&v| v >= n) {
            return shape_err("info_nce_var", format!("pair index out of range for {n} points"));
        }
        let neg_start = us.len();
        for &v in &p.negatives {
            us.push(p.anchor);
            vs.push(v);
            pos_w.push(0.0);
        }
        let negs: Vec<usize> = (neg_start..us.len()).collect();
        let w = anchor_w / p.positives.len() as f64;
        for &v in &p.positives {
            let idx = us.len();
            us.push(p.anchor);
            vs.push(v);
            pos_w.push(w);
            let mut g = Vec::with_capacity(negs.len() + 1);
            g.push(idx);
            g.extend_from_slice(&negs);
            groups.push(g);
            term_w.push(T::lit(w));
        }
    }
    let diff = tape.sub(&tape.gather_rows(emb, &us)?, &tape.gather_rows(emb, &vs)?)?;
    let d2 = tape.row_sums(&tape.mul(&diff, &diff)?)?;
    let sim = tape.exp(&tape.scale(&d2, T::lit(-1.0 / (2.0 * sigma * sigma)))?)?;
    let logits = tape.scale(&sim, T::lit(1.0 / temperature))?;
    let lse = tape.group_logsumexp(&logits, groups)?;
    let pos_w: Vec<T> = pos_w.into_iter().map(T::lit).collect();
    let loss = tape.sub(&tape.weighted_sum(&lse, &term_w)?, &tape.weighted_sum(&logits, &pos_w)?)?;
    Ok(Some(loss))
}

/// Mean focal loss over per-point logits `[n, 1]` or `[n]`.
pub fn focal_loss_var<T: Scalar>(
    tape: &Tape<T>,
    logits: &Var<T>,
    labels: &[bool],
    alpha: f64,
    lambda: f64,
) -> Result<Var<T>> {
    let z = logits.value().data();
    if z.len() != labels.len() || z.is_empty() {
        return shape_err("focal_loss_var", format!("{} logits vs {} labels", z.len(), labels.len()));
    }
    if !(0.0..=1.0).contains(&alpha) || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {alpha} or lambda {lambda} out of range")));
    }
    let n = T::lit(z.len() as f64);
    let (al, lam) = (T::lit(alpha), T::lit(lambda));
    // s = ±z so that p_t = σ(s); loss = α_t σ(-s)^λ softplus(-s)
    let signed: Vec<(T, T)> = z
        .iter()
        .zip(labels)
        .map(|(&z, &y)| if y { (z, al) } else { (-z, T::one() - al) })
        .collect();
    let total: T = signed
        .iter()
        .map(|&(s, at)| at * sigmoid(-s).powf(lam) * softplus(-s))
        .sum();
    let out = Tensor::scalar(total / n)?;
    let shape = logits.shape().to_vec();
    let labels = labels.to_vec();
    Ok(tape.custom(&[logits], out, move |g, _| {
        let scale = g.data()[0] / n;
        let data = signed
            .iter()
            .zip(&labels)
            .map(|(&(s, at), &y)| {
                let q = sigmoid(-s);
                let qpow = if lam == T::zero() { T::one() } else { q.powf(lam) };
                let ds = -at * qpow * (lam * (T::one() - q) * softplus(-s) + q);
                scale * if y { ds } else { -ds }
            })
            .collect();
        Ok(vec![Some(Tensor::checked(shape.clone(), data, "focal_loss")?)])
    }))
}
