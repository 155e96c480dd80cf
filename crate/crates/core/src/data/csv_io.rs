//! Header-addressed CSV files holding one or more events.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{Hit, Particle, PileupEvent, TrackingEvent};
use crate::error::{Error, Result};

const TRACKING_COLUMNS: [&str; 10] = [
    "event_id", "hit_id", "x", "y", "z", "layer", "local_u", "local_v", "particle_id", "pt",
];
const PILEUP_COLUMNS: [&str; 9] = [
    "event_id", "particle_id_code", "eta", "phi", "pt", "energy", "charge", "vertex", "label",
];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HitRow {
    event_id: u64,
    hit_id: u64,
    x: f64,
    y: f64,
    z: f64,
    layer: u32,
    local_u: i64,
    local_v: i64,
    particle_id: i64,
    pt: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParticleRow {
    event_id: u64,
    particle_id_code: i64,
    eta: f64,
    phi: f64,
    pt: f64,
    energy: f64,
    charge: f64,
    vertex: i64,
    label: u8,
}

/// Seventeen significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: match kind {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                other => format!("{other:?}"),
            },
        },
    }
}

fn read_rows<R: DeserializeOwned>(path: &Path, expected: &[&str]) -> Result<Vec<R>> {
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse(1, "empty file".into()));
    }
    if let Some(h) = headers.iter().find(|h| !expected.contains(h)) {
        return Err(parse(1, format!("unknown column {h:?}")));
    }
    if let Some(c) = expected.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(parse(1, format!("missing column {c:?}")));
    }
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        return Err(parse(2, "no data rows".into()));
    }
    Ok(rows)
}

/// Groups rows by event id in order of first appearance.
fn group<R, K: PartialEq + Copy>(rows: Vec<R>, key: impl Fn(&R) -> K) -> Vec<(K, Vec<R>)> {
    let mut out: Vec<(K, Vec<R>)> = Vec::new();
    for r in rows {
        let k = key(&r);
        match out.iter_mut().find(|(e, _)| *e == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out
}

pub fn save_tracking_csv(events: &[TrackingEvent], path: impl AsRef<Path>) -> Result<()> {
    let rows = events.iter().flat_map(|ev| {
        ev.hits.iter().map(move |h| {
            vec![
                ev.event_id.to_string(),
                h.hit_id.to_string(),
                num(h.x),
                num(h.y),
                num(h.z),
                h.layer.to_string(),
                h.local_u.to_string(),
                h.local_v.to_string(),
                h.particle_id.to_string(),
                num(h.pt),
            ]
        })
    });
    write_rows(path.as_ref(), &TRACKING_COLUMNS, rows)
}

pub fn load_tracking_csv(path: impl AsRef<Path>) -> Result<Vec<TrackingEvent>> {
    let rows: Vec<HitRow> = read_rows(path.as_ref(), &TRACKING_COLUMNS)?;
    Ok(group(rows, |r| r.event_id)
        .into_iter()
        .map(|(event_id, rows)| {
            let hits: Vec<Hit> = rows
                .into_iter()
                .map(|r| Hit {
                    hit_id: r.hit_id,
                    x: r.x,
                    y: r.y,
                    z: r.z,
                    layer: r.layer,
                    local_u: r.local_u,
                    local_v: r.local_v,
                    particle_id: r.particle_id,
                    pt: r.pt,
                })
                .collect();
            let mut ids: Vec<i64> = hits.iter().filter(|h| !h.is_noise()).map(|h| h.particle_id).collect();
            ids.sort_unstable();
            ids.dedup();
            TrackingEvent {
                event_id,
                seed: None,
                n_particles: ids.len(),
                hits,
            }
        })
        .collect())
}

pub fn save_pileup_csv(events: &[PileupEvent], path: impl AsRef<Path>) -> Result<()> {
    let rows = events.iter().flat_map(|ev| {
        ev.particles.iter().map(move |p| {
            vec![
                ev.event_id.to_string(),
                p.particle_id_code.to_string(),
                num(p.eta),
                num(p.phi),
                num(p.pt),
                num(p.energy),
                num(p.charge),
                p.vertex.to_string(),
                u8::from(p.label).to_string(),
            ]
        })
    });
    write_rows(path.as_ref(), &PILEUP_COLUMNS, rows)
}

pub fn load_pileup_csv(path: impl AsRef<Path>) -> Result<Vec<PileupEvent>> {
    let path = path.as_ref();
    let rows: Vec<ParticleRow> = read_rows(path, &PILEUP_COLUMNS)?;
    if let Some(bad) = rows.iter().position(|r| r.label > 1) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: bad + 2,
            msg: "label must be 0 or 1".into(),
        });
    }
    Ok(group(rows, |r| r.event_id)
        .into_iter()
        .map(|(event_id, rows)| PileupEvent {
            event_id,
            seed: None,
            particles: rows
                .into_iter()
                .map(|r| Particle {
                    particle_id_code: r.particle_id_code,
                    eta: r.eta,
                    phi: r.phi,
                    pt: r.pt,
                    energy: r.energy,
                    charge: r.charge,
                    vertex: r.vertex,
                    label: r.label == 1,
                })
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pileup_event, generate_tracking_event, PileupConfig, TrackingConfig};

    fn strip_seed(mut evs: Vec<TrackingEvent>) -> Vec<TrackingEvent> {
        evs.iter_mut().for_each(|e| e.seed = None);
        evs
    }

    #[test]
    fn tracking_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let cfg = TrackingConfig { n_particles: 30, ..TrackingConfig::default() };
        let evs = vec![
            generate_tracking_event(1, 0, &cfg).unwrap(),
            generate_tracking_event(2, 1, &cfg).unwrap(),
        ];
        save_tracking_csv(&evs, &path).unwrap();
        let back = load_tracking_csv(&path).unwrap();
        assert_eq!(back, strip_seed(evs));
    }

    #[test]
    fn pileup_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut ev = generate_pileup_event(3, 5, &PileupConfig { n_particles: 300, ..PileupConfig::default() }).unwrap();
        save_pileup_csv(std::slice::from_ref(&ev), &path).unwrap();
        ev.seed = None;
        assert_eq!(load_pileup_csv(&path).unwrap(), vec![ev]);
    }

    #[test]
    fn permuted_header_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(
            &p,
            "pt,particle_id,local_v,local_u,layer,z,y,x,hit_id,event_id\n1.5,3,0,0,2,1.0,2.0,3.0,7,0\n",
        )
        .unwrap();
        let ev = load_tracking_csv(&p).unwrap();
        assert_eq!(ev[0].hits[0].x, 3.0);
        assert_eq!(ev[0].hits[0].hit_id, 7);
        assert_eq!(ev[0].hits[0].pt, 1.5);

        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_tracking_csv(&p), Err(Error::Parse { .. })));

        std::fs::write(&p, "event_id,hit_id,x,y,z,layer,local_u,local_v,particle_id,pt,extra\n").unwrap();
        let err = load_tracking_csv(&p).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");

        std::fs::write(
            &p,
            "event_id,hit_id,x,y,z,layer,local_u,local_v,particle_id,pt\n0,1,1,1,1,0,0,0,0,1\n0,2,oops,1,1,0,0,0,0,1\n",
        )
        .unwrap();
        match load_tracking_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
