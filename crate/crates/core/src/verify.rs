//! Randomised property suites behind `lampa verify`.
//!
//! Each suite draws its instances from a seeded generator and reports the
//! worst error it saw, so two runs with the same seed print the same verdict.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{linear_attention, masked_attention, StructuredMask};
use crate::error::{Error, Result};
use crate::loss::{focal_loss, focal_loss_var, info_nce, info_nce_var, PairSet};
use crate::lsh::{assign_buckets, HashEnsemble, LshConfig};
use crate::model::{Arch, Model, ModelConfig, PointBatch};
use crate::numeric::{grad_check_sampled, Scalar, Tape, Tensor};
use crate::ssm::{discretize, matrix_form, numerical_rank, recurrence, semiseparable_matrix, SsmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Duality,
    Rank,
    Attention,
    Assoc,
    Lsh,
    Grad,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Duality,
        Suite::Rank,
        Suite::Attention,
        Suite::Assoc,
        Suite::Lsh,
        Suite::Grad,
        Suite::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Rank => "rank",
            Suite::Attention => "attention",
            Suite::Assoc => "assoc",
            Suite::Lsh => "lsh",
            Suite::Grad => "grad",
            Suite::Loss => "loss",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Duality => 1000,
            Suite::Rank => 50,
            Suite::Attention | Suite::Assoc => 100,
            Suite::Lsh | Suite::Grad | Suite::Loss => 1,
        }
    }

    pub fn run(self, trials: usize, seed: u64) -> Result<SuiteReport> {
        if trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        match self {
            Suite::Duality => duality(trials, seed),
            Suite::Rank => rank(trials, seed),
            Suite::Attention => attention(trials, seed),
            Suite::Assoc => assoc(trials, seed),
            Suite::Lsh => lsh(trials, seed),
            Suite::Grad => grad(trials, seed),
            Suite::Loss => loss(trials, seed),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    /// Individual comparisons made.
    pub checks: usize,
    /// Largest error (or smallest margin) seen; see `detail`.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

/// Runs `suites` in order; `trials` replaces every suite's default count.
pub fn run_suites(suites: &[Suite], trials: Option<usize>, seed: u64) -> Result<Verdict> {
    let reports: Vec<SuiteReport> = suites
        .iter()
        .map(|s| s.run(trials.unwrap_or_else(|| s.default_trials()), seed))
        .collect::<Result<_>>()?;
    Ok(Verdict {
        seed,
        passed: reports.iter().all(|r| r.passed),
        suites: reports,
    })
}

fn rng_for(suite: Suite, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(suite as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Result<Tensor<f64>> {
    Tensor::from_fn([r, c], |_| rng.sample(StandardNormal))
}

/// Max-norm relative difference.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Random single-channel SSM with `t` steps and state size `n`.
pub fn random_ssm(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Result<SsmParams<f64>> {
    let delta = (0..t).map(|_| rng.gen_range(0.01..1.0)).collect();
    let a = (0..n).map(|_| -rng.gen_range(0.1..2.0)).collect();
    SsmParams::new(delta, a, normal(rng, t, n)?, normal(rng, t, n)?)
}

fn report(suite: Suite, trials: usize, checks: usize, worst: f64, tolerance: f64, detail: String) -> SuiteReport {
    SuiteReport {
        suite,
        trials,
        checks,
        worst,
        tolerance,
        passed: worst.is_finite() && worst <= tolerance,
        detail,
    }
}

fn duality(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(Suite::Duality, seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (t, n) = (rng.gen_range(1..=64), rng.gen_range(1..=8));
        let p = random_ssm(&mut rng, t, n)?;
        let d = discretize(&p)?;
        let x: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
        let y_rec = recurrence(&d, p.c(), &x)?;
        let y_mat = matrix_form(&semiseparable_matrix(&d, p.c())?, &x)?;
        worst = worst.max(rel_diff(&y_mat, &y_rec));
    }
    Ok(report(
        Suite::Duality,
        trials,
        trials,
        worst,
        1e-8,
        "max relative difference between the recurrence and the matrix form, T <= 64, N <= 8".into(),
    ))
}

fn rank(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(Suite::Rank, seed);
    let t = 32;
    let (mut excess, mut checks) = (i64::MIN, 0);
    for trial in 0..trials {
        let n = 2 + trial % 3;
        let p = random_ssm(&mut rng, t, n)?;
        let m = semiseparable_matrix(&discretize(&p)?, p.c())?;
        // every below-diagonal block sits inside some M[k.., ..k]
        for k in 1..t {
            let block = Tensor::from_fn([t - k, k], |i| m.at(k + i / k, i % k))?;
            let r = numerical_rank(&block, 1e-9)?;
            excess = excess.max(r as i64 - n as i64);
            checks += 1;
        }
    }
    Ok(report(
        Suite::Rank,
        trials,
        checks,
        excess as f64,
        0.0,
        "largest (numerical rank - N) over maximal below-diagonal blocks, T = 32, N in {2, 3, 4}".into(),
    ))
}

fn attention(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(Suite::Attention, seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (t, n) = (rng.gen_range(1..=48), rng.gen_range(1..=8));
        let a = -rng.gen_range(0.1..2.0);
        let p = SsmParams::new(
            (0..t).map(|_| rng.gen_range(0.01..1.0)).collect(),
            vec![a; n],
            normal(&mut rng, t, n)?,
            normal(&mut rng, t, n)?,
        )?;
        let d = discretize(&p)?;
        let x: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
        let abar: Vec<f64> = (0..t).map(|i| d.a_bar.at(i, 0)).collect();
        let mask = StructuredMask::semiseparable(&abar)?;
        let y = masked_attention(p.c(), &d.b_bar, &Tensor::column(x.clone())?, &mask)?;
        let want = matrix_form(&semiseparable_matrix(&d, p.c())?, &x)?;
        worst = worst.max(rel_diff(y.data(), &want));
    }
    Ok(report(
        Suite::Attention,
        trials,
        trials,
        worst,
        1e-10,
        "masked attention with the semiseparable mask against the SSM matrix form".into(),
    ))
}

fn assoc(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(Suite::Assoc, seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (t, dk, dv) = (rng.gen_range(1..=64), rng.gen_range(1..=16), rng.gen_range(1..=16));
        let q = normal(&mut rng, t, dk)?;
        let k = normal(&mut rng, t, dk)?;
        let v = normal(&mut rng, t, dv)?;
        let left = linear_attention(&q, &k, &v)?;
        let right = q.matmul(&k.transpose()?)?.matmul(&v)?;
        worst = worst.max(rel_diff(left.data(), right.data()));
    }
    Ok(report(
        Suite::Assoc,
        trials,
        trials,
        worst,
        1e-10,
        "Q (K^T V) against (Q K^T) V".into(),
    ))
}

/// `k` Gaussian clusters of `per` points in `dim` dimensions.
pub fn clustered_points(rng: &mut ChaCha8Rng, k: usize, per: usize, dim: usize, spread: f64) -> Result<Tensor<f64>> {
    let centers = normal(rng, k, dim)?.scale(spread)?;
    Tensor::from_fn([k * per, dim], |i| {
        let (p, d) = (i / dim, i % dim);
        centers.at(p / per, d) + rng.sample::<f64, _>(StandardNormal)
    })
}

fn lsh(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(Suite::Lsh, seed);
    let (k, per, dim) = (20, 100, 2);
    let n = k * per;
    let mut worst_margin = f64::INFINITY;
    let mut checks = 0;
    let mut notes = Vec::new();
    for trial in 0..trials {
        let pts = clustered_points(&mut rng, k, per, dim, 20.0)?;
        let cfg = LshConfig { coords_only: true, ..LshConfig::default() };
        let ens = HashEnsemble::<f64>::new(cfg.clone(), 0, dim, seed.wrapping_add(trial as u64))?;
        let a = assign_buckets(None, &pts, &ens, per)?;
        let buckets: Vec<Vec<usize>> = a.tables.iter().map(|t| t.bucket_of(per)).collect();
        let inputs = ens.hash_inputs(None, &pts)?;
        let r = ens.bucket_width(&inputs)?;
        let codes = ens.codes(&inputs, r)?;
        let m1 = buckets.len();
        let m2 = cfg.m2;
        let (mut same, mut cross) = (0u64, 0u64);
        let (mut same_or, mut cross_or) = (0u64, 0u64);
        let mut same_single = vec![0u64; m1];
        // [prefix length][same/cross] collisions of the AND code, pooled over tables
        let mut and_hits = vec![[0u64; 2]; m2];
        for i in 0..n {
            for j in (i + 1)..n {
                let s = i / per == j / per;
                let hit_or = buckets.iter().any(|b| b[i] == b[j]);
                if s {
                    same += 1;
                    same_or += u64::from(hit_or);
                    for (t, b) in buckets.iter().enumerate() {
                        same_single[t] += u64::from(b[i] == b[j]);
                    }
                } else {
                    cross += 1;
                    cross_or += u64::from(hit_or);
                }
                for table in &codes {
                    let (ci, cj) = (&table[i], &table[j]);
                    let agree = ci.iter().zip(cj).take_while(|(x, y)| x == y).count();
                    for hits in and_hits.iter_mut().take(agree) {
                        hits[usize::from(!s)] += 1;
                    }
                }
            }
        }
        let (ps, pc) = (same_or as f64 / same as f64, cross_or as f64 / cross as f64);
        let best_single = same_single.iter().copied().max().unwrap_or(0) as f64 / same as f64;
        let precision: Vec<f64> = and_hits
            .iter()
            .map(|h| if h[0] + h[1] == 0 { 1.0 } else { h[0] as f64 / (h[0] + h[1]) as f64 })
            .collect();
        // margins are >= 0 when the property holds
        let ratio_margin = ps - 5.0 * pc;
        let or_margin = ps - best_single;
        let and_margin = precision.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        worst_margin = worst_margin.min(ratio_margin).min(or_margin).min(and_margin);
        checks += 2 + precision.len().saturating_sub(1);
        notes.push(format!(
            "same {ps:.4} cross {pc:.4} best single {best_single:.4} AND precision {precision:.4?}"
        ));
    }
    let detail = format!("worst is minus the smallest margin; {}", notes.join("; "));
    let mut rep = report(Suite::Lsh, trials, checks, -worst_margin, 0.0, detail);
    rep.passed = worst_margin >= 0.0;
    Ok(rep)
}

fn small_model(arch: Arch, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        arch,
        hidden_dim: 8,
        n_layers: layers,
        embed_out_dim: 4,
        block_size: 16,
        d_state: 4,
        seed,
        ..ModelConfig::default()
    }
}

fn grad(trials: usize, seed: u64) -> Result<SuiteReport> {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = rng_for(Suite::Grad, seed);
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut names = Vec::new();
    let mut note = |name: &str, err: f64, n: usize| {
        if err > worst || names.is_empty() {
            names.push(format!("{name} {err:.2e}"));
        }
        worst = worst.max(err);
        checks += n;
    };
    for _ in 0..trials {
        let s = rng.gen::<u64>();
        // InfoNCE over RBF similarities
        let emb = normal(&mut rng, 12, 3)?;
        let labels: Vec<i64> = (0..12).map(|i| i % 3).collect();
        let pairs: Vec<PairSet> = (0..12)
            .map(|u| PairSet {
                anchor: u,
                positives: (0..12).filter(|&v| v != u && labels[v] == labels[u]).collect(),
                negatives: (0..12).filter(|&v| labels[v] != labels[u]).collect(),
            })
            .collect();
        let r = grad_check_sampled(
            |t, v| info_nce_var(t, &v[0], &pairs, 1.0, 0.1)?.ok_or(Error::InvalidArgument("no pairs".into())),
            &[emb],
            EPS,
            TOL,
            usize::MAX,
        )?;
        note("info_nce", r.max_rel_err, r.checked);

        let logits = normal(&mut rng, 40, 1)?;
        let y: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.3)).collect();
        let r = grad_check_sampled(|t, v| focal_loss_var(t, &v[0], &y, 0.25, 2.0), &[logits], EPS, TOL, usize::MAX)?;
        note("focal", r.max_rel_err, r.checked);

        let batch = PointBatch {
            features: normal(&mut rng, 48, 6)?,
            coords: normal(&mut rng, 48, 2)?,
            pid: None,
        };
        let block = Model::<f64>::new(small_model(Arch::MambaPlain, 1, s))?;
        let x = normal(&mut rng, 32, 8)?;
        let w: Vec<f64> = (0..32 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = grad_check_sampled(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = block.block_forward(t, v, 0, &xv)?;
                t.weighted_sum(&y, &w)
            },
            block.params(),
            EPS,
            TOL,
            12,
        )?;
        note("mamba_block", r.max_rel_err, r.checked);

        for arch in [Arch::MambaA, Arch::MambaB] {
            let m = Model::<f64>::new(small_model(arch, 2, s))?;
            let w: Vec<f64> = (0..48 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = grad_check_sampled(
                |t, v| {
                    let y = m.forward(t, v, &batch)?;
                    t.weighted_sum(&y, &w)
                },
                m.params(),
                EPS,
                TOL,
                12,
            )?;
            note(arch.name(), r.max_rel_err, r.checked);
        }
    }
    Ok(report(
        Suite::Grad,
        trials,
        checks,
        worst,
        TOL,
        format!("max relative error, eps {EPS}: {}", names.join(", ")),
    ))
}

fn loss(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng_for(Suite::Loss, seed);
    let focal = focal_loss(0.5f64, true, 0.25, 2.0);
    let nce = info_nce(1.0f64, &[0.0])?;
    let mut worst = (focal - 0.043322).abs().max((nce - 0.313262).abs());
    let mut checks = 2;
    for _ in 0..trials {
        // the scalar forms against their definitions
        let p: f64 = rng.gen_range(0.01..0.99);
        let y = rng.gen_bool(0.5);
        let pt = if y { p } else { 1.0 - p };
        let at = if y { 0.25 } else { 0.75 };
        worst = worst.max((focal_loss(p, y, 0.25, 2.0) - (-at * (1.0 - pt).powi(2) * pt.ln())).abs());
        let pos: f64 = rng.gen_range(-1.0..1.0);
        let negs: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let direct = -(pos.exp() / (pos.exp() + negs.iter().map(|s| s.exp()).sum::<f64>())).ln();
        worst = worst.max((info_nce(pos, &negs)? - direct).abs());
        // the tape form of focal loss reduces to the scalar form
        let z = rng.gen_range(-3.0..3.0);
        let tape = Tape::<f64>::inference();
        let v = focal_loss_var(&tape, &tape.constant(Tensor::vector(vec![z])?), &[y], 0.25, 2.0)?;
        let sig = 1.0 / (1.0 + (-z).exp());
        worst = worst.max((v.value().item()?.as_f64() - focal_loss(sig, y, 0.25, 2.0)).abs());
        checks += 3;
    }
    Ok(report(
        Suite::Loss,
        trials,
        checks,
        worst,
        1e-6,
        format!("focal(0.5, 1, 0.25, 2) = {focal:.6}, InfoNCE(1; 0) = {nce:.6}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_and_repeat() {
        let v = run_suites(&Suite::ALL, Some(2), 3).unwrap();
        assert!(v.passed, "{v:#?}");
        assert_eq!(v, run_suites(&Suite::ALL, Some(2), 3).unwrap());
        assert_eq!("rank".parse::<Suite>().unwrap(), Suite::Rank);
        assert!("ranks".parse::<Suite>().is_err());
        assert!(Suite::Duality.run(0, 0).is_err());
    }

    #[test]
    fn rel_diff_scale() {
        assert_eq!(rel_diff(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rel_diff(&[1.0, 3.0], &[1.0, 2.0]), 0.5);
    }
}
