use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Recorded in every report so readers know which recall is meant.
pub const RECALL_DEFINITION: &str = "per_cluster_mean_of_retrieved_fraction";

/// Metrics of one event. Unavailable entries are `None` (for example no AUC
/// on tracking events).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub event_id: u64,
    pub n_hits: usize,
    pub top1_accuracy: Option<f64>,
    pub top1_recall: Option<f64>,
    pub roc_auc: Option<f64>,
    pub loss: Option<f64>,
    pub flops_per_event: u64,
    pub throughput_hits_per_sec: Option<f64>,
    pub config_digest: String,
    pub seed: u64,
    pub recall_definition: String,
}

impl MetricsReport {
    /// Field-wise mean of the available values; the event id is that of the
    /// first report.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
        let mean = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let n = reports.len() as u64;
        Ok(MetricsReport {
            event_id: first.event_id,
            n_hits: reports.iter().map(|r| r.n_hits).sum::<usize>() / reports.len(),
            top1_accuracy: mean(|r| r.top1_accuracy),
            top1_recall: mean(|r| r.top1_recall),
            roc_auc: mean(|r| r.roc_auc),
            loss: mean(|r| r.loss),
            flops_per_event: reports.iter().map(|r| r.flops_per_event).sum::<u64>() / n,
            throughput_hits_per_sec: mean(|r| r.throughput_hits_per_sec),
            config_digest: first.config_digest.clone(),
            seed: first.seed,
            recall_definition: first.recall_definition.clone(),
        })
    }
}

/// 64-bit FNV-1a of the config's JSON form, as hex.
pub fn config_digest(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// One JSON object per line.
pub fn write_jsonl<S: Serialize>(path: impl AsRef<Path>, rows: &[S]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Header from the first row's field names.
pub fn write_csv<S: Serialize>(path: impl AsRef<Path>, rows: &[S]) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush()?;
    Ok(())
}
