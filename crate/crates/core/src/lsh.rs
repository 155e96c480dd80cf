//! E2LSH with OR&AND composition and sorted-chunk bucketing.
//!
//! Hash inputs are rows of `[features ‖ w·coords]` (or `w·coords` alone when
//! `coords_only` is set). Points are ordered per OR table by their AND code,
//! ties broken by input index, and the ordering is cut into consecutive
//! buckets of `block_size`.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Scalar, Tensor};

/// `H(x) = ⌊(a·x + b) / r⌋`.
#[derive(Clone, Debug, PartialEq)]
pub struct E2lshFunction<T: Scalar> {
    a: Vec<T>,
    b: T,
    r: T,
}

impl<T: Scalar> E2lshFunction<T> {
    pub fn new(a: Vec<T>, b: T, r: T) -> Result<Self> {
        if !(r > T::zero()) {
            return Err(Error::InvalidArgument(format!("bucket width must be positive, got {r}")));
        }
        if !(b >= T::zero() && b < r) {
            return Err(Error::InvalidArgument(format!("offset {b} outside [0, {r})")));
        }
        Ok(Self { a, b, r })
    }

    /// `a ~ N(0, I)`, `b ~ U[0, r)`.
    pub fn random(dim: usize, r: T, rng: &mut impl Rng) -> Result<Self> {
        let a = (0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let b = r * T::lit(rng.gen::<f64>());
        Self::new(a, b, r)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[T] {
        &self.a
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn r(&self) -> T {
        self.r
    }

    pub fn hash(&self, x: &[T]) -> Result<i64> {
        e2lsh_hash(x, self)
    }
}

pub fn e2lsh_hash<T: Scalar>(x: &[T], f: &E2lshFunction<T>) -> Result<i64> {
    if x.len() != f.a.len() {
        return shape_err("e2lsh_hash", format!("input dim {} vs {}", x.len(), f.a.len()));
    }
    let dot: T = x.iter().zip(&f.a).map(|(&x, &a)| x * a).sum();
    let v = ((dot + f.b) / f.r).floor();
    v.to_i64()
        .ok_or_else(|| Error::Domain(format!("hash value {v} does not fit in an integer")))
}

/// AND code of one point: the hashes of `[x ‖ w·coords]` under every function.
pub fn and_code<T: Scalar>(
    x: &[T],
    funcs: &[E2lshFunction<T>],
    coords: &[T],
    geometric_weight: T,
) -> Result<Vec<i64>> {
    let input: Vec<T> = x
        .iter()
        .copied()
        .chain(coords.iter().map(|&c| c * geometric_weight))
        .collect();
    funcs.iter().map(|f| f.hash(&input)).collect()
}

/// Hashing hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshConfig {
    pub m1: usize,
    pub m2: usize,
    pub geometric_weight: f64,
    /// Fixed bucket width; `None` uses the median pairwise distance of a
    /// 512-point subsample of the hashed inputs.
    pub bucket_width: Option<f64>,
    pub coords_only: bool,
    pub n_regions: usize,
}

impl Default for LshConfig {
    fn default() -> Self {
        Self {
            m1: 3,
            m2: 3,
            geometric_weight: 1.0,
            bucket_width: None,
            coords_only: false,
            n_regions: 1,
        }
    }
}

const MEDIAN_SUBSAMPLE: usize = 512;

/// `m1` OR tables of `m2` AND functions each.
///
/// Offsets are kept as fractions of the bucket width so the width can be
/// chosen from the data at hashing time.
#[derive(Clone, Debug)]
pub struct HashEnsemble<T: Scalar> {
    config: LshConfig,
    dim: usize,
    seed: u64,
    directions: Vec<Vec<Vec<T>>>,
    offsets: Vec<Vec<f64>>,
}

impl<T: Scalar> HashEnsemble<T> {
    /// Function `j` of table `i` is drawn from its own stream, so an
    /// ensemble with larger `m2` extends a smaller one with the same seed.
    pub fn new(config: LshConfig, feature_dim: usize, coord_dim: usize, seed: u64) -> Result<Self> {
        if config.m1 == 0 || config.m2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "m1 and m2 must be at least 1, got ({}, {})",
                config.m1, config.m2
            )));
        }
        if config.n_regions == 0 {
            return Err(Error::InvalidArgument("n_regions must be at least 1".into()));
        }
        if let Some(r) = config.bucket_width {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidArgument(format!("bucket width must be positive, got {r}")));
            }
        }
        if !config.geometric_weight.is_finite() {
            return Err(Error::InvalidArgument("geometric weight must be finite".into()));
        }
        let dim = if config.coords_only {
            coord_dim
        } else {
            feature_dim + coord_dim
        };
        if dim == 0 {
            return Err(Error::InvalidArgument("hash input dimension is zero".into()));
        }
        let mut directions = Vec::with_capacity(config.m1);
        let mut offsets = Vec::with_capacity(config.m1);
        for i in 0..config.m1 {
            let mut dirs = Vec::with_capacity(config.m2);
            let mut offs = Vec::with_capacity(config.m2);
            for j in 0..config.m2 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((i as u64) << 32) | j as u64);
                dirs.push((0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect());
                offs.push(rng.gen::<f64>());
            }
            directions.push(dirs);
            offsets.push(offs);
        }
        Ok(Self {
            config,
            dim,
            seed,
            directions,
            offsets,
        })
    }

    pub fn config(&self) -> &LshConfig {
        &self.config
    }

    pub fn m1(&self) -> usize {
        self.config.m1
    }

    pub fn m2(&self) -> usize {
        self.config.m2
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    /// The functions of table `i` at bucket width `r`.
    pub fn table(&self, i: usize, r: T) -> Result<Vec<E2lshFunction<T>>> {
        if i >= self.config.m1 {
            return Err(Error::InvalidArgument(format!("table {i} of {}", self.config.m1)));
        }
        self.directions[i]
            .iter()
            .zip(&self.offsets[i])
            .map(|(a, &frac)| E2lshFunction::new(a.clone(), (r * T::lit(frac)).min(r * T::lit(1.0 - 1e-12)), r))
            .collect()
    }

    /// Rows of `[features ‖ w·coords]`, or `w·coords` alone.
    pub fn hash_inputs(&self, features: Option<&Tensor<T>>, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let n = coords.rows();
        let w = T::lit(self.config.geometric_weight);
        let feats = if self.config.coords_only { None } else { features };
        let fdim = feats.map_or(0, |f| f.cols());
        if fdim + coords.cols() != self.dim {
            return shape_err(
                "hash_inputs",
                format!("{} feature + {} coordinate columns, ensemble expects {}", fdim, coords.cols(), self.dim),
            );
        }
        if let Some(f) = feats {
            if f.rows() != n {
                return shape_err("hash_inputs", format!("{} feature rows vs {n} points", f.rows()));
            }
        }
        let mut data = Vec::with_capacity(n * self.dim);
        for p in 0..n {
            if let Some(f) = feats {
                data.extend_from_slice(f.row(p));
            }
            data.extend(coords.row(p).iter().map(|&c| c * w));
        }
        Tensor::new([n, self.dim], data)
    }

    /// Bucket width for these hash inputs.
    pub fn bucket_width(&self, inputs: &Tensor<T>) -> Result<T> {
        match self.config.bucket_width {
            Some(r) => Ok(T::lit(r)),
            None => median_pairwise_distance(inputs, MEDIAN_SUBSAMPLE, self.seed),
        }
    }

    /// AND codes of every point, per table: `[m1][n][m2]`.
    pub fn codes(&self, inputs: &Tensor<T>, r: T) -> Result<Vec<Vec<Vec<i64>>>> {
        if inputs.cols() != self.dim {
            return shape_err("codes", format!("inputs {:?}, ensemble dim {}", inputs.shape(), self.dim));
        }
        (0..self.config.m1)
            .map(|i| {
                let funcs = self.table(i, r)?;
                (0..inputs.rows())
                    .map(|p| funcs.iter().map(|f| f.hash(inputs.row(p))).collect())
                    .collect()
            })
            .collect()
    }
}

/// Median Euclidean distance over all pairs of a seeded subsample.
pub fn median_pairwise_distance<T: Scalar>(points: &Tensor<T>, max_points: usize, seed: u64) -> Result<T> {
    let n = points.rows();
    if n < 2 {
        return Ok(T::one());
    }
    let idx: Vec<usize> = if n > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ee_d0f_a11);
        let mut v = sample(&mut rng, n, max_points).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (k, &i) in idx.iter().enumerate() {
        for &j in &idx[k + 1..] {
            let s: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum();
            d.push(s.sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    // all points identical: any width works
    Ok(T::lit(if m > 0.0 { m } else { 1.0 }))
}

/// Ordering and buckets of one OR table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableOrder {
    /// `order[k]` is the input index at sorted position `k`.
    pub order: Vec<usize>,
    /// `inverse[i]` is the sorted position of input `i`.
    pub inverse: Vec<usize>,
    /// Ranges into `order`.
    pub buckets: Vec<Range<usize>>,
}

impl TableOrder {
    pub fn from_order(order: Vec<usize>, block_size: usize) -> Result<Self> {
        let n = order.len();
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be at least 1".into()));
        }
        let mut inverse = vec![usize::MAX; n];
        for (k, &i) in order.iter().enumerate() {
            if i >= n || inverse[i] != usize::MAX {
                return Err(Error::InvalidArgument("ordering is not a permutation".into()));
            }
            inverse[i] = k;
        }
        let buckets = (0..n)
            .step_by(block_size)
            .map(|s| s..(s + block_size).min(n))
            .collect();
        Ok(Self {
            order,
            inverse,
            buckets,
        })
    }

    /// Bucket index of every input point.
    pub fn bucket_of(&self, block_size: usize) -> Vec<usize> {
        self.inverse.iter().map(|&k| k / block_size).collect()
    }

    /// `payload` rearranged into sorted order.
    pub fn apply<V: Clone>(&self, payload: &[V]) -> Vec<V> {
        self.order.iter().map(|&i| payload[i].clone()).collect()
    }

    /// Inverse of [`TableOrder::apply`].
    pub fn restore<V: Clone>(&self, sorted: &[V]) -> Vec<V> {
        self.inverse.iter().map(|&k| sorted[k].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketAssignment {
    pub block_size: usize,
    pub tables: Vec<TableOrder>,
}

impl BucketAssignment {
    pub fn n_points(&self) -> usize {
        self.tables.first().map_or(0, |t| t.order.len())
    }

    pub fn m1(&self) -> usize {
        self.tables.len()
    }

    /// One table, one bucket: plain full attention.
    pub fn single_bucket(n: usize) -> Result<Self> {
        Ok(Self {
            block_size: n.max(1),
            tables: vec![TableOrder::from_order((0..n).collect(), n.max(1))?],
        })
    }
}

/// Sorts each table by `(region, AND code, index)` and chunks into buckets.
pub fn order_by_codes(
    codes: &[Vec<Vec<i64>>],
    regions: Option<&[usize]>,
    block_size: usize,
) -> Result<BucketAssignment> {
    let n = codes.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::InvalidArgument("cannot bucket an empty point set".into()));
    }
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    if let Some(r) = regions {
        if r.len() != n {
            return shape_err("assign_buckets", format!("{} region labels for {n} points", r.len()));
        }
    }
    let tables = codes
        .iter()
        .map(|table| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| {
                let ri = regions.map_or(0, |r| r[i]);
                let rj = regions.map_or(0, |r| r[j]);
                ri.cmp(&rj).then_with(|| table[i].cmp(&table[j])).then(i.cmp(&j))
            });
            TableOrder::from_order(order, block_size)
        })
        .collect::<Result<_>>()?;
    Ok(BucketAssignment { block_size, tables })
}

/// Hashes `[features ‖ w·coords]` and buckets every OR table.
pub fn assign_buckets<T: Scalar>(
    features: Option<&Tensor<T>>,
    coords: &Tensor<T>,
    ensemble: &HashEnsemble<T>,
    block_size: usize,
) -> Result<BucketAssignment> {
    if coords.rows() == 0 || coords.is_empty() {
        return Err(Error::InvalidArgument("cannot bucket an empty point set".into()));
    }
    let inputs = ensemble.hash_inputs(features, coords)?;
    let r = ensemble.bucket_width(&inputs)?;
    let codes = ensemble.codes(&inputs, r)?;
    let regions = if ensemble.config.n_regions > 1 {
        let first = order_by_codes(&codes[..1], None, block_size)?;
        Some(random_region_partition(
            &first.tables[0].order,
            ensemble.config.n_regions,
            ensemble.seed,
        )?)
    } else {
        None
    };
    order_by_codes(&codes, regions.as_deref(), block_size)
}

/// Splits a hash ordering into `n_regions` contiguous, non-empty runs at
/// seeded random cut points. Returns the region label of every point.
pub fn random_region_partition(hash_order: &[usize], n_regions: usize, seed: u64) -> Result<Vec<usize>> {
    let n = hash_order.len();
    if n_regions == 0 || n_regions > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= n_regions <= {n}, got {n_regions}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // n_regions - 1 distinct cuts among the n - 1 gaps
    let mut cuts = sample(&mut rng, n - 1, n_regions - 1).into_vec();
    cuts.sort_unstable();
    let mut labels = vec![0; n];
    let mut region = 0;
    let mut next = cuts.iter().peekable();
    for (k, &p) in hash_order.iter().enumerate() {
        labels[p] = region;
        if next.peek().is_some_and(|&&c| c == k) {
            next.next();
            region += 1;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor<f64> {
        Tensor::from_fn([n, dim], |_| rng.sample(StandardNormal)).unwrap()
    }

    #[test]
    fn hash_formula() {
        let f = E2lshFunction::new(vec![1.0, 0.0], 0.5, 1.0).unwrap();
        assert_eq!(f.hash(&[0.0, 3.0]).unwrap(), 0);
        let f = E2lshFunction::new(vec![1.0, 0.0], 0.0, 2.0).unwrap();
        assert_eq!(f.hash(&[3.0, 5.0]).unwrap(), 1);
        assert!(f.hash(&[1.0]).is_err());
        assert!(E2lshFunction::new(vec![1.0], 1.0, 1.0).is_err());
        assert!(E2lshFunction::new(vec![1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn shift_by_width_moves_one_bucket() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut a: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter_mut().for_each(|v| *v /= norm);
            let r: f64 = 0.25;
            let f = E2lshFunction::new(a.clone(), 0.125, r).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + r * a).collect();
            // skip draws within rounding distance of a boundary
            let t = (x.iter().zip(&a).map(|(x, a)| x * a).sum::<f64>() + 0.125) / r;
            if (t - t.round()).abs() < 1e-9 {
                continue;
            }
            assert_eq!(f.hash(&y).unwrap() - f.hash(&x).unwrap(), 1);
        }
    }

    #[test]
    fn and_code_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let funcs: Vec<_> = (0..3).map(|_| E2lshFunction::random(4, 1.0, &mut rng).unwrap()).collect();
        let x = [0.3, -0.2];
        let c = [1.0, 2.0];
        assert_eq!(and_code(&x, &funcs, &c, 0.5).unwrap(), and_code(&x, &funcs, &c, 0.5).unwrap());
        let one = and_code(&x, &funcs[..1], &c, 0.5).unwrap();
        assert_eq!(one, vec![e2lsh_hash(&[0.3, -0.2, 0.5, 1.0], &funcs[0]).unwrap()]);
    }

    #[test]
    fn nested_ensembles_share_functions() {
        let cfg = |m2| LshConfig { m2, bucket_width: Some(1.0), ..LshConfig::default() };
        let small = HashEnsemble::<f64>::new(cfg(1), 3, 2, 9).unwrap();
        let big = HashEnsemble::<f64>::new(cfg(3), 3, 2, 9).unwrap();
        for i in 0..3 {
            assert_eq!(small.table(i, 1.0).unwrap()[0], big.table(i, 1.0).unwrap()[0]);
        }
    }

    #[test]
    fn far_pairs_collide_less_with_more_and_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = gaussian(&mut rng, 1000, 4);
        let r = 0.5;
        let rate = |m2: usize| {
            let cfg = LshConfig { m1: 1, m2, bucket_width: Some(r), coords_only: true, ..LshConfig::default() };
            let ens = HashEnsemble::<f64>::new(cfg, 0, 4, 11).unwrap();
            let codes = &ens.codes(&pts, r).unwrap()[0];
            let (mut far, mut hit) = (0usize, 0usize);
            for i in 0..1000 {
                for j in (i + 1)..1000 {
                    let d: f64 = pts.row(i).iter().zip(pts.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    if d > 4.0 * r {
                        far += 1;
                        hit += usize::from(codes[i] == codes[j]);
                    }
                }
            }
            hit as f64 / far as f64
        };
        let (r1, r3) = (rate(1), rate(3));
        assert!(r3 < r1, "m2=3 rate {r3} vs m2=1 rate {r1}");
    }

    #[test]
    fn bucket_sizes_and_remainder() {
        let coords = Tensor::from_fn([10, 2], |i| i as f64).unwrap();
        let ens = HashEnsemble::<f64>::new(LshConfig { coords_only: true, ..LshConfig::default() }, 0, 2, 0).unwrap();
        let a = assign_buckets(None, &coords, &ens, 5).unwrap();
        assert_eq!(a.m1(), 3);
        for t in &a.tables {
            assert_eq!(t.buckets, vec![0..5, 5..10]);
        }
        let coords = Tensor::from_fn([11, 2], |i| i as f64).unwrap();
        let a = assign_buckets(None, &coords, &ens, 5).unwrap();
        let sizes: Vec<usize> = a.tables[0].buckets.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![5, 5, 1]);
        assert!(assign_buckets(None, &Tensor::<f64>::zeros([0, 2]), &ens, 5).is_err());
        assert!(assign_buckets(None, &coords, &ens, 0).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let codes = vec![vec![vec![1], vec![0], vec![1], vec![0]]];
        let a = order_by_codes(&codes, None, 2).unwrap();
        assert_eq!(a.tables[0].order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn permutation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = gaussian(&mut rng, 37, 3);
        let ens = HashEnsemble::<f64>::new(LshConfig { coords_only: true, ..LshConfig::default() }, 0, 3, 5).unwrap();
        let a = assign_buckets(None, &pts, &ens, 6).unwrap();
        let payload: Vec<u32> = (0..37).map(|_| rng.gen()).collect();
        for t in &a.tables {
            let mut seen = t.order.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
            assert_eq!(t.restore(&t.apply(&payload)), payload);
            assert!(t.buckets.iter().all(|b| b.len() <= 6));
            assert_eq!(t.buckets.iter().map(|b| b.len()).sum::<usize>(), 37);
        }
    }

    #[test]
    fn clustered_pairs_share_buckets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, per, dim) = (20, 100, 6);
        let centers = gaussian(&mut rng, k, dim).scale(20.0).unwrap();
        let pts = Tensor::from_fn([k * per, dim], |i| {
            let (p, d) = (i / dim, i % dim);
            centers.at(p / per, d) + rng.sample::<f64, _>(StandardNormal)
        })
        .unwrap();
        let cfg = LshConfig { m1: 3, m2: 3, bucket_width: Some(1.0), coords_only: true, ..LshConfig::default() };
        let ens = HashEnsemble::<f64>::new(cfg, 0, dim, 6).unwrap();
        let a = assign_buckets(None, &pts, &ens, per).unwrap();
        let buckets: Vec<Vec<usize>> = a.tables.iter().map(|t| t.bucket_of(per)).collect();
        let (mut same, mut same_hit, mut cross, mut cross_hit) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..k * per {
            for j in (i + 1)..k * per {
                let hit = buckets.iter().any(|b| b[i] == b[j]);
                if i / per == j / per {
                    same += 1;
                    same_hit += u64::from(hit);
                } else {
                    cross += 1;
                    cross_hit += u64::from(hit);
                }
            }
        }
        let (ps, pc) = (same_hit as f64 / same as f64, cross_hit as f64 / cross as f64);
        assert!(ps >= 5.0 * pc, "same {ps} cross {pc}");
    }

    #[test]
    fn region_partition() {
        let order: Vec<usize> = (0..10).rev().collect();
        assert_eq!(random_region_partition(&order, 1, 3).unwrap(), vec![0; 10]);
        let single = random_region_partition(&order, 10, 3).unwrap();
        let mut s = single.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        // contiguous in hash order
        assert_eq!(single[9], 0);
        let p = random_region_partition(&order, 4, 42).unwrap();
        assert_eq!(p, random_region_partition(&order, 4, 42).unwrap());
        let along: Vec<usize> = order.iter().map(|&i| p[i]).collect();
        assert!(along.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        assert_eq!(*along.last().unwrap(), 3);
        assert!(random_region_partition(&order, 11, 0).is_err());
        assert!(random_region_partition(&order, 0, 0).is_err());
    }

    #[test]
    fn regions_group_in_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = gaussian(&mut rng, 50, 2);
        let cfg = LshConfig { n_regions: 4, coords_only: true, ..LshConfig::default() };
        let ens = HashEnsemble::<f64>::new(cfg, 0, 2, 1).unwrap();
        let a = assign_buckets(None, &pts, &ens, 8).unwrap();
        let first = order_by_codes(&ens.codes(&ens.hash_inputs(None, &pts).unwrap(), ens.bucket_width(&pts).unwrap()).unwrap()[..1], None, 8).unwrap();
        let regions = random_region_partition(&first.tables[0].order, 4, 1).unwrap();
        for t in &a.tables {
            let along: Vec<usize> = t.order.iter().map(|&i| regions[i]).collect();
            assert!(along.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn median_width() {
        let pts = Tensor::new([3, 1], vec![0.0, 1.0, 3.0]).unwrap();
        // distances 1, 2, 3
        assert_eq!(median_pairwise_distance(&pts, 512, 0).unwrap(), 2.0);
        let same = Tensor::<f64>::zeros([4, 2]);
        assert_eq!(median_pairwise_distance(&same, 512, 0).unwrap(), 1.0);
    }

    #[test]
    fn feature_and_coordinate_inputs() {
        let ens = HashEnsemble::<f64>::new(LshConfig { geometric_weight: 2.0, ..LshConfig::default() }, 2, 1, 0).unwrap();
        let f = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new([1, 1], vec![3.0]).unwrap();
        assert_eq!(ens.hash_inputs(Some(&f), &c).unwrap().data(), &[1.0, 2.0, 6.0]);
        assert!(ens.hash_inputs(None, &c).is_err());
        assert!(HashEnsemble::<f64>::new(LshConfig { m1: 0, ..LshConfig::default() }, 2, 1, 0).is_err());
    }
}
