use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, PointBatch};
use crate::numeric::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputResult {
    pub workers: usize,
    pub reps: usize,
    pub n_hits: usize,
    /// Hits per second, one entry per timed repetition.
    pub samples: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Median wall-clock seconds for one pass over all batches.
    pub median_seconds: f64,
}

impl ThroughputResult {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn pass<T: Scalar>(model: &Model<T>, batches: &[PointBatch<T>], workers: usize) -> Result<()> {
    if workers <= 1 {
        for b in batches {
            model.infer(b)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || -> Result<()> {
                    for b in batches.iter().skip(w).step_by(workers) {
                        model.infer(b)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::InvalidArgument("benchmark worker panicked".into()))?)
            .collect()
    })
}

/// Inference throughput over `batches` after `warmup` discarded passes.
/// `workers == 1` pins everything to the calling thread; more workers split
/// the batches round-robin.
pub fn throughput_bench<T: Scalar>(
    model: &Model<T>,
    batches: &[PointBatch<T>],
    warmup: usize,
    reps: usize,
    workers: usize,
) -> Result<ThroughputResult> {
    if reps < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 repetitions, got {reps}")));
    }
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no batches to benchmark".into()));
    }
    let workers = workers.clamp(1, batches.len());
    let n_hits: usize = batches.iter().map(PointBatch::len).sum();
    for _ in 0..warmup {
        pass(model, batches, workers)?;
    }
    let mut seconds = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        pass(model, batches, workers)?;
        seconds.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    let samples: Vec<f64> = seconds.iter().map(|s| n_hits as f64 / s).collect();
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    seconds.sort_by(f64::total_cmp);
    Ok(ThroughputResult {
        workers,
        reps,
        n_hits,
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        median_seconds: quantile(&seconds, 0.5),
        samples,
    })
}
