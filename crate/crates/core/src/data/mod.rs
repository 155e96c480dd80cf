//! Synthetic tracking and pileup events, sector splitting and CSV I/O.

mod csv_io;
mod pileup;
mod tracking;

use std::f64::consts::PI;

pub use csv_io::{load_pileup_csv, load_tracking_csv, save_pileup_csv, save_tracking_csv};
pub use pileup::{generate_pileup_event, Particle, PileupConfig, PileupEvent, N_PID_CODES, PILEUP_SCALARS};
pub use tracking::{
    filter_pt, generate_tracking_event, helix_position, Detector, TrackingConfig, B_FIELD_T, PT_MIN,
};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// `(r, φ, z)` with `φ = atan2(y, x)`.
pub fn to_cylindrical(x: f64, y: f64, z: f64) -> (f64, f64, f64) {
    (x.hypot(y), y.atan2(x), z)
}

pub fn to_cartesian(r: f64, phi: f64, z: f64) -> (f64, f64, f64) {
    (r * phi.cos(), r * phi.sin(), z)
}

/// Maps `atan2` output onto `(-π, π]`.
pub fn wrap_phi(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    if p <= -PI {
        p += 2.0 * PI;
    }
    p
}

/// Pseudorapidity of a point seen from the origin.
pub fn pseudorapidity(r: f64, z: f64) -> f64 {
    (z / r).asinh()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub hit_id: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub layer: u32,
    pub local_u: i64,
    pub local_v: i64,
    /// `-1` marks noise.
    pub particle_id: i64,
    /// Transverse momentum of the producing particle in GeV, 0 for noise.
    pub pt: f64,
}

impl Hit {
    pub fn r(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn phi(&self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn eta(&self) -> f64 {
        pseudorapidity(self.r(), self.z)
    }

    pub fn is_noise(&self) -> bool {
        self.particle_id < 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingEvent {
    pub event_id: u64,
    /// Generator seed, when known.
    pub seed: Option<u64>,
    pub n_particles: usize,
    pub hits: Vec<Hit>,
}

impl TrackingEvent {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn labels(&self) -> Vec<i64> {
        self.hits.iter().map(|h| h.particle_id).collect()
    }

    /// Per-hit inputs `[r/1000, z/1000, η, φ/π, cos φ, sin φ]`.
    pub fn features(&self) -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(self.hits.len() * TRACKING_FEATURES);
        for h in &self.hits {
            let phi = h.phi();
            data.extend_from_slice(&[
                h.r() / 1000.0,
                h.z / 1000.0,
                h.eta(),
                phi / PI,
                phi.cos(),
                phi.sin(),
            ]);
        }
        Tensor::new([self.hits.len(), TRACKING_FEATURES], data)
    }

    /// Hashing coordinates `[η, φ]`.
    pub fn coords(&self) -> Result<Tensor<f64>> {
        let data = self.hits.iter().flat_map(|h| [h.eta(), h.phi()]).collect();
        Tensor::new([self.hits.len(), 2], data)
    }
}

pub const TRACKING_FEATURES: usize = 6;

/// Splits hits into `n_sector` equal φ wedges starting at `-π`.
pub fn split_sectors(event: &TrackingEvent, n_sector: usize) -> Result<Vec<TrackingEvent>> {
    if n_sector == 0 {
        return Err(Error::InvalidArgument("n_sector must be at least 1".into()));
    }
    let width = 2.0 * PI / n_sector as f64;
    let mut parts: Vec<Vec<Hit>> = vec![Vec::new(); n_sector];
    for h in &event.hits {
        let s = (((h.phi() + PI) / width) as usize).min(n_sector - 1);
        parts[s].push(h.clone());
    }
    Ok(parts
        .into_iter()
        .map(|hits| {
            let mut ids: Vec<i64> = hits.iter().filter(|h| !h.is_noise()).map(|h| h.particle_id).collect();
            ids.sort_unstable();
            ids.dedup();
            TrackingEvent {
                event_id: event.event_id,
                seed: event.seed,
                n_particles: ids.len(),
                hits,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cylindrical_cases() {
        assert_eq!(to_cylindrical(1.0, 0.0, 5.0), (1.0, 0.0, 5.0));
        let (r, p, z) = to_cylindrical(0.0, 2.0, -1.0);
        assert_eq!((r, z), (2.0, -1.0));
        assert!((p - PI / 2.0).abs() < 1e-15);
        for &(x, y, z) in &[(1.3, -2.7, 0.4), (-5.0, -1e-3, 2.0), (-3.0, 0.0, 1.0)] {
            let (r, p, zz) = to_cylindrical(x, y, z);
            assert!(p > -PI && p <= PI);
            let (a, b, c) = to_cartesian(r, p, zz);
            assert!((a - x).abs() < 1e-12 && (b - y).abs() < 1e-12 && c == z);
        }
        assert_eq!(wrap_phi(3.0 * PI), PI);
        assert!((wrap_phi(-PI) - PI).abs() < 1e-15);
    }
}
