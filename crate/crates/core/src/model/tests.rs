use super::*;
use crate::data::{generate_pileup_event, PileupConfig};
use crate::lsh::LshConfig;
use crate::numeric::grad_check_sampled;

fn rand_batch(n: usize, input_dim: usize, seed: u64) -> PointBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointBatch {
        features: Tensor::from_fn([n, input_dim], |_| rng.sample(StandardNormal)).unwrap(),
        coords: Tensor::from_fn([n, 2], |i| if i % 2 == 0 { rng.gen_range(-1.5..1.5) } else { rng.gen_range(-3.1..3.1) })
            .unwrap(),
        pid: None,
    }
}

fn small(arch: Arch, n_layers: usize) -> ModelConfig {
    ModelConfig {
        arch,
        hidden_dim: 8,
        n_layers,
        embed_out_dim: 4,
        block_size: 16,
        d_state: 4,
        seed: 11,
        ..ModelConfig::default()
    }
}

#[test]
fn preset_parameter_counts() {
    let t = Task::Tracking;
    let count = |a, s| ModelConfig::preset(a, s, t).param_count();
    assert_eq!(count(Arch::MambaB, Scale::S), 304_992);
    assert_eq!(count(Arch::MambaB, Scale::M), 600_168);
    assert_eq!(count(Arch::MambaB, Scale::L), 954_408);
    assert_eq!(count(Arch::MambaA, Scale::S), 173_472);
    assert_eq!(count(Arch::MambaA, Scale::M), 359_976);
    assert_eq!(count(Arch::MambaA, Scale::L), 478_056);
    // reported sizes in millions
    let table = [
        (Arch::MambaPlain, Scale::S, 0.33),
        (Arch::MambaPlain, Scale::M, 0.63),
        (Arch::MambaA, Scale::S, 0.17),
        (Arch::MambaA, Scale::M, 0.35),
        (Arch::MambaA, Scale::L, 0.50),
        (Arch::MambaB, Scale::S, 0.32),
        (Arch::MambaB, Scale::M, 0.61),
        (Arch::MambaB, Scale::L, 0.99),
    ];
    for (a, s, m) in table {
        let got = count(a, s) as f64 / 1e6;
        assert!((got / m - 1.0).abs() <= 0.10, "{a:?} {s:?}: {got} vs {m}");
    }
    let m = Model::<f64>::new(ModelConfig::preset(Arch::MambaA, Scale::S, t)).unwrap();
    assert_eq!(m.param_count(), 173_472);
}

#[test]
fn pileup_presets() {
    let b = ModelConfig::preset(Arch::MambaB, Scale::S, Task::Pileup);
    assert_eq!((b.hidden_dim, b.n_layers, b.block_size), (48, 8, 100));
    let a = ModelConfig::preset(Arch::MambaA, Scale::L, Task::Pileup);
    assert_eq!((a.hidden_dim, a.n_layers, a.output_dim()), (24, 8, 1));
    assert_eq!(block_size_grid("tracking-60k", Arch::MambaA).unwrap(), &[140, 150, 160]);
    assert!(block_size_grid("tracking-1k", Arch::MambaB).is_err());
}

fn zero_biases(m: &mut Model<f64>) {
    let params = m
        .param_names()
        .iter()
        .zip(m.params())
        .map(|(n, p)| if n.ends_with(".b") || n.ends_with(".bias") { Tensor::zeros(p.shape()) } else { p.clone() })
        .collect();
    m.set_params(params).unwrap();
}

#[test]
fn block_zero_input_is_identity() {
    let mut m = Model::<f64>::new(small(Arch::MambaPlain, 1)).unwrap();
    zero_biases(&mut m);
    let tape = Tape::new();
    let vars = m.vars(&tape);
    let x = tape.constant(Tensor::zeros([5, 8]));
    let y = m.block_forward(&tape, &vars, 0, &x).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_is_causal() {
    let m = Model::<f64>::new(small(Arch::MambaPlain, 1)).unwrap();
    let tape = Tape::inference();
    let vars = m.vars(&tape);
    let x = rand_batch(24, 8, 3).features;
    let base = m.block_forward(&tape, &vars, 0, &tape.constant(x.clone())).unwrap();
    for t in [0, 7, 23] {
        let mut xp = x.clone();
        xp.data_mut()[t * 8 + 2] += 0.5;
        let y = m.block_forward(&tape, &vars, 0, &tape.constant(xp)).unwrap();
        for row in 0..24 {
            let diff: f64 = (0..8).map(|c| (y.value().at(row, c) - base.value().at(row, c)).abs()).sum();
            if row < t {
                assert_eq!(diff, 0.0, "row {row} moved after perturbing {t}");
            } else if row == t {
                assert!(diff > 0.0);
            }
        }
    }
    // a single token only sees itself
    let one = m.block_forward(&tape, &vars, 0, &tape.constant(x.gather_rows(&[5]).unwrap())).unwrap();
    let first = m.block_forward(&tape, &vars, 0, &tape.constant(x.gather_rows(&[5, 6]).unwrap())).unwrap();
    assert_eq!(one.value().row(0), first.value().row(0));
}

#[test]
fn output_shapes_and_zero_layers() {
    for arch in [Arch::MambaPlain, Arch::MambaA, Arch::MambaB] {
        for n_layers in [0, 2] {
            let m = Model::<f64>::new(small(arch, n_layers)).unwrap();
            for n in [8, 100, 3000] {
                let y = m.infer(&rand_batch(n, 6, n as u64)).unwrap();
                assert_eq!(y.shape(), &[n, 4]);
                assert!(y.data().iter().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn preset_forward_is_finite() {
    for arch in [Arch::MambaPlain, Arch::MambaA, Arch::MambaB] {
        let m = Model::<f64>::new(ModelConfig::preset(arch, Scale::S, Task::Tracking)).unwrap();
        let y = m.infer(&rand_batch(400, 6, 9)).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn bypassed_blocks_reduce_to_head() {
    let cfg = ModelConfig {
        bypass_blocks: true,
        ..small(Arch::MambaB, 3)
    };
    let m = Model::<f64>::new(cfg.clone()).unwrap();
    let mut bare = Model::<f64>::new(ModelConfig { n_layers: 0, ..cfg }).unwrap();
    let shared: Vec<Tensor<f64>> = bare
        .param_names()
        .iter()
        .map(|n| m.params()[m.param_names().iter().position(|x| x == n).unwrap()].clone())
        .collect();
    bare.set_params(shared).unwrap();
    let batch = rand_batch(50, 6, 1);
    assert_eq!(m.infer(&batch).unwrap(), bare.infer(&batch).unwrap());
}

#[test]
fn single_table_reuses_one_ordering() {
    let cfg = ModelConfig {
        lsh: LshConfig { m1: 1, ..LshConfig::default() },
        ..small(Arch::MambaB, 3)
    };
    let m = Model::<f64>::new(cfg).unwrap();
    let tape = Tape::inference();
    let (_, trace) = m.forward_traced(&tape, &m.vars(&tape), &rand_batch(40, 6, 2)).unwrap();
    assert_eq!(trace.assignments.len(), 1);
    assert_eq!(trace.assignments[0].m1(), 1);

    let a = Model::<f64>::new(ModelConfig { reuse_assignment: true, ..small(Arch::MambaA, 3) }).unwrap();
    let (_, trace) = a.forward_traced(&tape, &a.vars(&tape), &rand_batch(40, 6, 2)).unwrap();
    assert_eq!(trace.assignments.len(), 3);
    assert!(Rc::ptr_eq(&trace.assignments[0], &trace.assignments[2]));
}

fn check_grads(cfg: ModelConfig, batch: &PointBatch<f64>) {
    let m = Model::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..batch.len() * m.config().output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check_sampled(
        |tape, vars| {
            let y = m.forward(tape, vars, batch)?;
            tape.weighted_sum(&y, &w)
        },
        m.params(),
        1e-5,
        1e-4,
        12,
    )
    .unwrap();
    assert!(report.passed, "{:?}: {report:?} at {}", m.config().arch, m.param_names()[report.worst.0]);
}

#[test]
fn grad_check_architectures() {
    let batch = rand_batch(64, 6, 4);
    for arch in [Arch::MambaPlain, Arch::MambaA, Arch::MambaB] {
        check_grads(small(arch, 2), &batch);
    }
    check_grads(ModelConfig { reset_state_at_block: true, ..small(Arch::MambaB, 2) }, &batch);
}

#[test]
fn grad_check_pileup_input_path() {
    let ev = generate_pileup_event(1, 0, &PileupConfig { n_particles: 64, ..PileupConfig::default() }).unwrap();
    let cfg = ModelConfig {
        task: Task::Pileup,
        input_dim: crate::data::PILEUP_SCALARS,
        ..small(Arch::MambaB, 2)
    };
    check_grads(cfg, &PointBatch::from_pileup(&ev).unwrap());
}

#[test]
fn mamba_b_is_permutation_equivariant() {
    // fine buckets make every AND code distinct, so sorting ignores input order
    let ev = generate_pileup_event(6, 0, &PileupConfig { n_particles: 120, ..PileupConfig::default() }).unwrap();
    let batch = PointBatch::<f64>::from_pileup(&ev).unwrap();
    let cfg = ModelConfig {
        task: Task::Pileup,
        input_dim: crate::data::PILEUP_SCALARS,
        lsh: LshConfig { bucket_width: Some(1e-3), ..LshConfig::default() },
        ..small(Arch::MambaB, 2)
    };
    let m = Model::<f64>::new(cfg).unwrap();
    let mut perm: Vec<usize> = (0..120).collect();
    perm.reverse();
    perm.swap(3, 40);
    let y = m.infer(&batch).unwrap();
    let yp = m.infer(&batch.permuted(&perm).unwrap()).unwrap();
    assert_eq!(yp, y.gather_rows(&perm).unwrap());
}

#[test]
fn pileup_head_outputs_probabilities() {
    let ev = generate_pileup_event(4, 0, &PileupConfig { n_particles: 300, ..PileupConfig::default() }).unwrap();
    let mut batch = PointBatch::<f64>::from_pileup(&ev).unwrap();
    let cfg = ModelConfig {
        task: Task::Pileup,
        input_dim: crate::data::PILEUP_SCALARS,
        ..small(Arch::MambaB, 2)
    };
    let m = Model::<f64>::new(cfg).unwrap();
    let p = m.predict_proba(&batch).unwrap();
    assert_eq!(p.len(), 300);
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    batch.pid.as_mut().unwrap()[7] = 8;
    assert!(matches!(m.predict_proba(&batch), Err(Error::InvalidArgument(_))));
    batch.pid = None;
    assert!(m.infer(&batch).is_err());
}

#[test]
fn positional_encoding_values() {
    let c = Tensor::new([1, 2], vec![0.5, -1.0]).unwrap();
    let pe = positional_encoding(&c, 8).unwrap();
    // two frequencies (1, 32) per coordinate
    let want = [0.5f64.sin(), 0.5f64.cos(), 16.0f64.sin(), 16.0f64.cos(), (-1.0f64).sin(), (-1.0f64).cos(), (-32.0f64).sin(), (-32.0f64).cos()];
    for (a, b) in pe.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(positional_encoding(&c, 10).unwrap().at(0, 9), 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::<f64>::new(small(Arch::MambaA, 2)).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back: Model<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in back.params().iter().zip(m.params()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let batch = rand_batch(30, 6, 0);
    assert_eq!(back.infer(&batch).unwrap(), m.infer(&batch).unwrap());

    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"garbage!garbage!").unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_configs_rejected() {
    assert!(Model::<f64>::new(ModelConfig { hidden_dim: 0, ..ModelConfig::default() }).is_err());
    assert!(Model::<f64>::new(ModelConfig { block_size: 0, ..ModelConfig::default() }).is_err());
    let m = Model::<f64>::new(small(Arch::MambaB, 1)).unwrap();
    assert!(m.infer(&rand_batch(10, 5, 0)).is_err());
}
