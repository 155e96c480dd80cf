//! Training loop, evaluation and the sector sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_sectors, PileupEvent, TrackingEvent};
use crate::error::{Error, Result};
use crate::loss::{build_pairs, focal_loss_var, info_nce_var, ContrastiveConfig};
use crate::metrics::{
    accuracy, config_digest, flops_estimate, recall, roc_auc, throughput_bench, MetricsReport, RECALL_DEFINITION,
};
use crate::model::{save_checkpoint, Model, ModelConfig, PointBatch, Task};
use crate::numeric::{sigmoid, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Events per optimizer step; their losses are averaged.
    pub batch: usize,
    /// Event shuffling.
    pub seed: u64,
    /// Write a checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub contrastive: ContrastiveConfig,
    pub focal_alpha: f64,
    pub focal_lambda: f64,
    /// Leave wall-clock times out of the log so runs compare byte for byte.
    pub deterministic: bool,
    /// Compute accuracy (tracking) or AUC (pileup) over the training set after each epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            max_steps: None,
            batch: 1,
            seed: 0,
            checkpoint_every: None,
            contrastive: ContrastiveConfig::default(),
            focal_alpha: 0.25,
            focal_lambda: 2.0,
            deterministic: true,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Events of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Tracking(Vec<TrackingEvent>),
    Pileup(Vec<PileupEvent>),
}

enum Labels {
    Tracking(Vec<i64>),
    Pileup(Vec<bool>),
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::Tracking(_) => Task::Tracking,
            Dataset::Pileup(_) => Task::Pileup,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Tracking(e) => e.len(),
            Dataset::Pileup(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn event_ids(&self) -> Vec<u64> {
        match self {
            Dataset::Tracking(e) => e.iter().map(|e| e.event_id).collect(),
            Dataset::Pileup(e) => e.iter().map(|e| e.event_id).collect(),
        }
    }

    pub fn batches<T: Scalar>(&self) -> Result<Vec<PointBatch<T>>> {
        match self {
            Dataset::Tracking(e) => e.iter().map(PointBatch::from_tracking).collect(),
            Dataset::Pileup(e) => e.iter().map(PointBatch::from_pileup).collect(),
        }
    }

    fn labels(&self) -> Vec<Labels> {
        match self {
            Dataset::Tracking(e) => e.iter().map(|e| Labels::Tracking(e.labels())).collect(),
            Dataset::Pileup(e) => e.iter().map(|e| Labels::Pileup(e.labels())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
        lr: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_clock: Option<f64>,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        /// `accuracy` (tracking) or `roc_auc` (pileup).
        metric: String,
        value: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_clock: Option<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub log: Vec<LogEntry>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Losses of every optimizer step.
    pub fn losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-parameter optimizer state.
pub struct Optimizer<T: Scalar> {
    cfg: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let c = &self.cfg;
        let lr = T::lit(c.lr);
        let wd = T::lit(c.lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            for (j, (x, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                *x -= wd * *x;
                match c.kind {
                    OptimizerKind::Sgd => *x -= lr * gj,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = b1 * *m + (T::one() - b1) * gj;
                        *v = b2 * *v + (T::one() - b2) * gj * gj;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *x -= lr * mh / (vh.sqrt() + T::lit(c.eps));
                    }
                }
            }
        }
    }
}

/// Loss of one event on the tape; `None` when the event offers no signal
/// (no anchor with a positive).
fn event_loss<T: Scalar>(
    cfg: &TrainConfig,
    model: &Model<T>,
    tape: &Tape<T>,
    vars: &[Var<T>],
    batch: &PointBatch<T>,
    labels: &Labels,
) -> Result<Option<Var<T>>> {
    let out = model.forward(tape, vars, batch)?;
    match labels {
        Labels::Tracking(l) => {
            let pairs = build_pairs(out.value(), l, &cfg.contrastive.pairs)?;
            info_nce_var(tape, &out, &pairs, cfg.contrastive.sigma, cfg.contrastive.temperature)
        }
        Labels::Pileup(l) => focal_loss_var(tape, &out, l, cfg.focal_alpha, cfg.focal_lambda).map(Some),
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains from the config's initial model. `checkpoint_dir` receives
/// `epoch{N}.ckpt` files at the configured cadence.
pub fn train<T: Scalar>(cfg: &TrainConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = Model::<T>::new(cfg.model.clone())?;
    train_from(cfg, model, dataset, checkpoint_dir)
}

/// Continues training `model`.
pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    mut model: Model<T>,
    dataset: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if dataset.task() != model.config().task {
        return Err(Error::Config(format!(
            "model task {} does not match dataset task {}",
            model.config().task.name(),
            dataset.task().name()
        )));
    }
    let batches = dataset.batches::<T>()?;
    let labels = dataset.labels();
    let mut params = model.params().to_vec();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let clock = || (!cfg.deterministic).then(|| start.elapsed().as_secs_f64());
    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let tape = Tape::new();
            let vars: Vec<Var<T>> = params.iter().map(|p| tape.param(p.clone())).collect();
            let mut terms = Vec::new();
            for &i in chunk {
                if let Some(l) = event_loss(cfg, &model, &tape, &vars, &batches[i], &labels[i]).map_err(diverged(step))? {
                    terms.push(l);
                }
            }
            if terms.is_empty() {
                continue;
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = tape.add(&total, t)?;
            }
            let loss = tape.scale(&total, T::lit(1.0 / terms.len() as f64)).map_err(diverged(step))?;
            let value = loss.value().item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {value}"),
                });
            }
            let grads = tape.backward(&loss).map_err(diverged(step))?;
            let g: Vec<Tensor<T>> = vars.iter().map(|v| grads.get_or_zero(v)).collect();
            if let Some(i) = g.iter().position(|t| t.data().iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite gradient for {}", model.param_names()[i]),
                });
            }
            opt.step(&mut params, &g);
            step += 1;
            epoch_losses.push(value);
            log.push(LogEntry::Step {
                step,
                epoch,
                loss: value,
                lr: cfg.optimizer.lr,
                wall_clock: clock(),
            });
        }
        model.set_params(params.clone())?;
        let (metric, value) = if cfg.eval_each_epoch {
            epoch_metric(&model, dataset).map_err(diverged(step))?
        } else {
            (String::new(), None)
        };
        let mean_loss = if epoch_losses.is_empty() {
            f64::NAN
        } else {
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
        };
        log.push(LogEntry::Epoch {
            epoch,
            mean_loss,
            metric,
            value,
            wall_clock: clock(),
        });
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, checkpoint_dir) {
            if epoch % every == 0 {
                save_checkpoint(&model, dir.join(format!("epoch{epoch}.ckpt")))?;
            }
        }
    }
    model.set_params(params)?;
    Ok(TrainOutcome { model, log })
}

fn epoch_metric<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<(String, Option<f64>)> {
    let reports = evaluate(model, dataset, &EvalOptions::default())?;
    let agg = MetricsReport::aggregate(&reports)?;
    Ok(match dataset.task() {
        Task::Tracking => ("accuracy".into(), agg.top1_accuracy),
        Task::Pileup => ("roc_auc".into(), agg.roc_auc),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Measure per-event throughput as well.
    pub throughput: bool,
    pub warmup: usize,
    pub reps: usize,
    pub contrastive: ContrastiveConfig,
    pub focal_alpha: f64,
    pub focal_lambda: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            throughput: false,
            warmup: 1,
            reps: 3,
            contrastive: ContrastiveConfig::default(),
            focal_alpha: 0.25,
            focal_lambda: 2.0,
            seed: 0,
        }
    }
}

/// One report per event; metrics that are undefined for an event (no
/// anchors, a single class) are left empty.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, opts: &EvalOptions) -> Result<Vec<MetricsReport>> {
    if dataset.task() != model.config().task {
        return Err(Error::Config(format!(
            "checkpoint task {} does not match dataset task {}",
            model.config().task.name(),
            dataset.task().name()
        )));
    }
    let digest = config_digest(model.config());
    let batches = dataset.batches::<T>()?;
    let ids = dataset.event_ids();
    let labels = dataset.labels();
    let mut out = Vec::with_capacity(batches.len());
    for ((batch, labels), id) in batches.iter().zip(&labels).zip(ids) {
        let tape = Tape::inference();
        let vars = model.vars(&tape);
        let y = model.forward(&tape, &vars, batch)?;
        let (acc, rec, auc, loss) = match labels {
            Labels::Tracking(l) => {
                let pairs = build_pairs(y.value(), l, &opts.contrastive.pairs)?;
                let c = &opts.contrastive;
                let loss = info_nce_var(&tape, &y, &pairs, c.sigma, c.temperature)?
                    .map(|v| v.value().item().map(|x| x.as_f64()))
                    .transpose()?;
                (accuracy(y.value(), l).ok(), recall(y.value(), l).ok(), None, loss)
            }
            Labels::Pileup(l) => {
                let scores: Vec<f64> = y.value().data().iter().map(|&z| sigmoid(z).as_f64()).collect();
                let loss = focal_loss_var(&tape, &y, l, opts.focal_alpha, opts.focal_lambda)?;
                (None, None, roc_auc(&scores, l).ok(), Some(loss.value().item()?.as_f64()))
            }
        };
        let throughput = if opts.throughput {
            Some(throughput_bench(model, std::slice::from_ref(batch), opts.warmup, opts.reps, 1)?.median)
        } else {
            None
        };
        out.push(MetricsReport {
            event_id: id,
            n_hits: batch.len(),
            top1_accuracy: acc,
            top1_recall: rec,
            roc_auc: auc,
            loss,
            flops_per_event: flops_estimate(model.config(), batch.len()),
            throughput_hits_per_sec: throughput,
            config_digest: digest.clone(),
            seed: opts.seed,
            recall_definition: RECALL_DEFINITION.into(),
        });
    }
    Ok(out)
}

/// Sector counts swept by default.
pub const SECTOR_SWEEP: [usize; 6] = [1, 2, 3, 6, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_sector: usize,
    /// Mean hits per sector.
    pub n_hits: usize,
    /// Mean FLOPs of one sector.
    pub flops: u64,
    pub workers: usize,
    /// Hits per second over all sectors.
    pub throughput_median: f64,
    pub throughput_q1: f64,
    pub throughput_q3: f64,
    /// Median seconds to process one sector.
    pub seconds_per_sector: f64,
}

/// Splits `event` into φ sectors for each count in `sectors` and measures
/// FLOPs and throughput on the resulting per-sector batches.
pub fn sector_sweep<T: Scalar>(
    model: &Model<T>,
    event: &TrackingEvent,
    sectors: &[usize],
    warmup: usize,
    reps: usize,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if model.config().task != Task::Tracking {
        return Err(Error::Config("sector sweeps need a tracking model".into()));
    }
    sectors
        .iter()
        .map(|&s| {
            let parts: Vec<PointBatch<T>> = split_sectors(event, s)?
                .iter()
                .filter(|p| !p.is_empty())
                .map(PointBatch::from_tracking)
                .collect::<Result<_>>()?;
            let bench = throughput_bench(model, &parts, warmup, reps, workers)?;
            let n_hits = bench.n_hits / parts.len();
            let flops = parts.iter().map(|p| flops_estimate(model.config(), p.len())).sum::<u64>() / parts.len() as u64;
            Ok(SweepRow {
                n_sector: s,
                n_hits,
                flops,
                workers: bench.workers,
                throughput_median: bench.median,
                throughput_q1: bench.q1,
                throughput_q3: bench.q3,
                seconds_per_sector: bench.median_seconds / parts.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pileup_event, generate_tracking_event, PileupConfig, TrackingConfig};
    use crate::model::{load_checkpoint, Arch};

    fn toy(seed: u64) -> Dataset {
        let cfg = TrackingConfig::preset("toy").unwrap();
        Dataset::Tracking(vec![generate_tracking_event(seed, 0, &cfg).unwrap()])
    }

    fn small_cfg(arch: Arch) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                arch,
                hidden_dim: 8,
                n_layers: 2,
                embed_out_dim: 8,
                d_state: 4,
                block_size: 20,
                ..ModelConfig::default()
            },
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = small_cfg(Arch::MambaB);
        cfg.optimizer.lr = 0.0;
        let out = train::<f64>(&cfg, &toy(1), None).unwrap();
        let init = Model::<f64>::new(cfg.model.clone()).unwrap();
        assert_eq!(out.model.params(), init.params());
        let l = out.losses();
        assert_eq!(l.len(), 5);
        assert!(l.iter().all(|&x| x == l[0]));
    }

    #[test]
    fn same_seed_same_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: Some(5), ..small_cfg(Arch::MambaA) };
        let data = toy(2);
        let a = train::<f64>(&cfg, &data, Some(dir.path())).unwrap();
        let b = train::<f64>(&cfg, &data, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params(), b.model.params());
        let back: Model<f64> = load_checkpoint(dir.path().join("epoch5.ckpt")).unwrap();
        let (ea, eb) = (
            evaluate(&a.model, &data, &EvalOptions::default()).unwrap(),
            evaluate(&back, &data, &EvalOptions::default()).unwrap(),
        );
        assert_eq!(ea, eb);
        let p = dir.path().join("log.jsonl");
        a.write_log(&p).unwrap();
        assert!(!std::fs::read_to_string(&p).unwrap().contains("wall_clock"));
    }

    #[test]
    fn sgd_and_adam_reduce_loss() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut cfg = small_cfg(Arch::MambaPlain);
            cfg.epochs = 30;
            cfg.optimizer = OptimizerConfig { kind, lr: if kind == OptimizerKind::Sgd { 0.05 } else { 1e-2 }, ..OptimizerConfig::default() };
            let l = train::<f64>(&cfg, &toy(3), None).unwrap().losses();
            let head: f64 = l[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
            assert!(tail < head, "{kind:?}: {head} -> {tail}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = OptimizerConfig::default();
        let mut p = vec![Tensor::new([2], vec![1.0f64, -1.0]).unwrap()];
        let g = vec![Tensor::new([2], vec![0.5, -3.0]).unwrap()];
        Optimizer::new(cfg, &p).step(&mut p, &g);
        // bias-corrected first step moves every coordinate by lr against the gradient sign
        assert!((p[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[0].data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small_cfg(Arch::MambaPlain);
        cfg.optimizer = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 1e300, ..OptimizerConfig::default() };
        cfg.epochs = 3;
        match train::<f64>(&cfg, &toy(4), None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pileup_training_and_task_checks() {
        let ev = generate_pileup_event(1, 0, &PileupConfig { n_particles: 200, lv_frac: 0.3, ..PileupConfig::default() }).unwrap();
        let data = Dataset::Pileup(vec![ev]);
        let mut cfg = small_cfg(Arch::MambaB);
        cfg.epochs = 2;
        assert!(matches!(train::<f64>(&cfg, &data, None), Err(Error::Config(_))));
        cfg.model.task = Task::Pileup;
        cfg.model.input_dim = crate::data::PILEUP_SCALARS;
        let out = train::<f64>(&cfg, &data, None).unwrap();
        let reports = evaluate(&out.model, &data, &EvalOptions::default()).unwrap();
        assert!(reports[0].roc_auc.is_some() && reports[0].loss.is_some());
        assert!(evaluate(&out.model, &toy(1), &EvalOptions::default()).is_err());
        assert!(train::<f64>(&TrainConfig { epochs: 0, ..cfg }, &data, None).is_err());
    }

    #[test]
    fn aggregate_is_mean_of_events() {
        let cfg = TrackingConfig::preset("toy").unwrap();
        let data = Dataset::Tracking((0..3).map(|i| generate_tracking_event(i, i, &cfg).unwrap()).collect());
        let m = Model::<f64>::new(small_cfg(Arch::MambaB).model).unwrap();
        let reps = evaluate(&m, &data, &EvalOptions::default()).unwrap();
        let mean = reps.iter().map(|r| r.top1_accuracy.unwrap()).sum::<f64>() / 3.0;
        assert_eq!(MetricsReport::aggregate(&reps).unwrap().top1_accuracy, Some(mean));
    }

    #[test]
    fn sweep_emits_one_row_per_setting() {
        let ev = generate_tracking_event(0, 0, &TrackingConfig { n_particles: 60, ..TrackingConfig::default() }).unwrap();
        let m = Model::<f32>::new(small_cfg(Arch::MambaB).model).unwrap();
        let rows = sector_sweep(&m, &ev, &SECTOR_SWEEP, 0, 3, 1).unwrap();
        assert_eq!(rows.iter().map(|r| r.n_sector).collect::<Vec<_>>(), SECTOR_SWEEP);
        assert!(rows.windows(2).all(|w| w[0].n_hits > w[1].n_hits));
    }
}
