use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::model::{Arch, Model, ModelConfig, PointBatch, Scale, Task};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn([n, d], |_| rng.sample(StandardNormal)).unwrap()
}

/// Full sort of all distances.
fn brute_nearest(emb: &Tensor<f64>, u: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..emb.rows())
        .filter(|&v| v != u)
        .map(|v| (emb.row(v).iter().zip(emb.row(u)).map(|(a, b)| (a - b) * (a - b)).sum(), v))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, v)| v).collect()
}

#[test]
fn prec_at_k_cases() {
    let emb = Tensor::from_fn([6, 2], |i| i as f64).unwrap();
    assert_eq!(prec_at_k(&emb, &[4; 6], 2, None).unwrap(), 1.0);
    assert_eq!(prec_at_k(&emb, &[1, 2, 2, 2, 2, 2], 0, Some(3)).unwrap(), 0.0);
    assert!(prec_at_k(&emb, &[1, 2, 2, 2, 2, 2], 0, None).is_err());
    assert!(prec_at_k(&emb, &[4; 6], 0, Some(6)).is_err());
    // equidistant neighbours resolve by index
    let line = Tensor::new([3, 1], vec![0.0, -1.0, 1.0]).unwrap();
    assert_eq!(nearest(&line, 0, 1), vec![1]);
}

#[test]
fn prec_matches_brute_force_on_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = Tensor::from_fn([20, 3], |i| {
        let shift = if i / 3 < 10 { 0.0 } else { 1.5 };
        shift + rng.gen_range(-1.0..1.0)
    })
    .unwrap();
    let labels: Vec<i64> = (0..20).map(|i| (i >= 10) as i64).collect();
    for u in 0..20 {
        for k in [1, 5, 9, 19] {
            let want = brute_nearest(&emb, u, k).iter().filter(|&&v| labels[v] == labels[u]).count() as f64 / k as f64;
            assert_eq!(prec_at_k(&emb, &labels, u, Some(k)).unwrap(), want);
        }
    }
}

#[test]
fn accuracy_and_recall_on_collapsed_embeddings() {
    let labels: Vec<i64> = (0..60).map(|i| if i % 13 == 0 { -1 } else { (i % 5) as i64 }).collect();
    let emb = Tensor::from_fn([60, 2], |i| {
        let l = labels[i / 2];
        if l < 0 { 100.0 + i as f64 } else { 10.0 * l as f64 }
    })
    .unwrap();
    assert_eq!(accuracy(&emb, &labels).unwrap(), 1.0);
    assert_eq!(recall(&emb, &labels).unwrap(), 1.0);
    assert!(accuracy(&emb, &[-1; 60]).is_err());
}

#[test]
fn accuracy_of_random_embeddings_is_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, clusters) = (400usize, 20usize);
    let labels: Vec<i64> = (0..n).map(|i| (i % clusters) as i64).collect();
    let emb = gaussian(&mut rng, n, 8);
    let size = n / clusters;
    let p = (size - 1) as f64 / (n - 1) as f64;
    let sigma = (p * (1.0 - p) / (n * (size - 1)) as f64).sqrt();
    let acc = accuracy(&emb, &labels).unwrap();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc} vs {p} ± {}", 3.0 * sigma);
}

#[test]
fn recall_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<i64> = (0..30).map(|i| if i == 29 { -1 } else { (i % 4) as i64 }).collect();
    let emb = Tensor::from_fn([30, 2], |i| labels[i / 2].max(0) as f64 + rng.gen_range(-0.8..0.8)).unwrap();
    let mut total = 0.0;
    for c in 0..4 {
        let members: Vec<usize> = (0..30).filter(|&u| labels[u] == c).collect();
        let k = (members.len() - 1).min(MAX_K);
        let found: std::collections::HashSet<usize> = members.iter().flat_map(|&u| brute_nearest(&emb, u, k)).collect();
        total += members.iter().filter(|u| found.contains(u)).count() as f64 / members.len() as f64;
    }
    assert_eq!(recall(&emb, &labels).unwrap(), total / 4.0);

    // scattering one cluster lowers the mean
    let mut spread = Tensor::from_fn([8, 1], |i| (i / 2) as f64 * 10.0).unwrap();
    let lab = [0, 0, 1, 1, 2, 2, 3, 3];
    assert_eq!(recall(&spread, &lab).unwrap(), 1.0);
    spread.data_mut()[1] = 25.0;
    assert!(recall(&spread, &lab).unwrap() < 1.0);
}

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (_, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        for (j, &sj) in scores.iter().enumerate() {
            if !labels[j] {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

#[test]
fn roc_auc_cases() {
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(), 0.0);
    // positives 0.8, 0.4, 0.9 against 0.1, 0.4, 0.35: 8.5 of 9 pairs
    let s = [0.8, 0.1, 0.4, 0.4, 0.9, 0.35];
    let l = [true, false, true, false, true, false];
    assert!((roc_auc(&s, &l).unwrap() - 8.5 / 9.0).abs() < 1e-15);
    assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    assert!(roc_auc(&[1.0], &[true, false]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scores: Vec<f64> = (0..500).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..500).map(|_| rng.gen_bool(0.3)).collect();
    let auc = roc_auc(&scores, &labels).unwrap();
    assert!((auc - pair_auc(&scores, &labels)).abs() < 1e-12);
    let (p, q) = (labels.iter().filter(|&&x| x).count() as f64, labels.iter().filter(|&&x| !x).count() as f64);
    assert!((auc - 0.5).abs() <= 3.0 * ((p + q + 1.0) / (12.0 * p * q)).sqrt());
    // strictly monotone transforms leave the ranks alone
    let warped: Vec<f64> = scores.iter().map(|&x| (3.0 * x).exp() - 7.0).collect();
    assert_eq!(roc_auc(&warped, &labels).unwrap(), auc);
}

#[test]
fn flops_model_properties() {
    let b = ModelConfig::preset(Arch::MambaB, Scale::S, Task::Tracking);
    let plain = ModelConfig { arch: Arch::MambaPlain, ..b.clone() };
    for n in [1000, 6000, 30_000] {
        assert_eq!(flops_estimate(&b, 2 * n), 2 * flops_estimate(&b, n));
        assert_eq!(flops_estimate(&plain, 2 * n), 2 * flops_estimate(&plain, n));
    }
    let a = ModelConfig { arch: Arch::MambaA, ..b.clone() };
    assert!(flops_estimate(&a, 5000) > flops_estimate(&b, 5000));
    assert_eq!(flops_estimate(&a, 4000), 2 * flops_estimate(&a, 2000));
    let br = flops_breakdown(&b, 100);
    assert_eq!(br.attention, 0);
    assert!(br.hashing > 0 && br.total() == flops_estimate(&b, 100));
    // one mamba_b layer at d=24, E=192, N=16, R=2, K=4
    let one = ModelConfig { n_layers: 1, ..b };
    assert_eq!(flops_breakdown(&one, 1).mamba, 2 * (2 * 24 * 192 + 4 * 192 + 192 * 34 + 2 * 192 + 192 * 24) + 6 * 192 * 16);
}

#[test]
fn throughput_bench_shape() {
    let cfg = ModelConfig { hidden_dim: 8, n_layers: 1, d_state: 4, block_size: 16, ..ModelConfig::default() };
    let m = Model::<f32>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches: Vec<PointBatch<f32>> = (0..3)
        .map(|_| PointBatch {
            features: gaussian(&mut rng, 50, 6).cast(),
            coords: gaussian(&mut rng, 50, 2).cast(),
            pid: None,
        })
        .collect();
    let r = throughput_bench(&m, &batches, 1, 5, 1).unwrap();
    assert_eq!((r.n_hits, r.samples.len(), r.workers), (150, 5, 1));
    assert!(r.q1 <= r.median && r.median <= r.q3 && r.median > 0.0);
    assert_eq!(throughput_bench(&m, &batches, 0, 3, 8).unwrap().workers, 3);
    assert!(throughput_bench(&m, &batches, 0, 2, 1).is_err());
}

#[test]
fn reports_serialize_and_aggregate() {
    let cfg = ModelConfig::default();
    let digest = config_digest(&cfg);
    assert_eq!(digest, config_digest(&cfg.clone()));
    assert_ne!(digest, config_digest(&ModelConfig { seed: 1, ..cfg }));
    let rep = |acc: f64, id: u64| MetricsReport {
        event_id: id,
        n_hits: 100,
        top1_accuracy: Some(acc),
        top1_recall: None,
        roc_auc: None,
        loss: Some(1.0),
        flops_per_event: 10,
        throughput_hits_per_sec: None,
        config_digest: digest.clone(),
        seed: 0,
        recall_definition: RECALL_DEFINITION.into(),
    };
    let reports = vec![rep(0.5, 0), rep(0.7, 1), rep(0.9, 2)];
    let agg = MetricsReport::aggregate(&reports).unwrap();
    assert!((agg.top1_accuracy.unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(agg.top1_recall, None);
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(dir.path().join("r.jsonl"), &reports).unwrap();
    write_csv(dir.path().join("r.csv"), &reports).unwrap();
    let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let back: Vec<MetricsReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, reports);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("event_id,n_hits,top1_accuracy"));
    assert_eq!(csv.lines().count(), 4);
}
