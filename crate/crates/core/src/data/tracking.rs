use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{to_cartesian, wrap_phi, Hit, TrackingEvent};
use crate::error::{Error, Result};

/// Axial field in tesla.
pub const B_FIELD_T: f64 = 2.0;
/// Particles at or below this transverse momentum (GeV) are dropped.
pub const PT_MIN: f64 = 0.9;
const PT_MAX: f64 = 10.0;

/// Concentric barrel layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Detector {
    pub r_min: f64,
    pub r_max: f64,
    pub z_max: f64,
    pub sigma: f64,
    /// Readout cells per layer along φ and along z.
    pub phi_cells: u32,
    pub z_cells: u32,
}

impl Default for Detector {
    fn default() -> Self {
        Self {
            r_min: 30.0,
            r_max: 1000.0,
            z_max: 3000.0,
            sigma: 0.1,
            phi_cells: 1024,
            z_cells: 512,
        }
    }
}

impl Detector {
    /// Layer radii spread linearly over `[r_min, r_max]`.
    pub fn radii(&self, layers: usize) -> Vec<f64> {
        if layers == 1 {
            return vec![self.r_min];
        }
        (0..layers)
            .map(|i| self.r_min + (self.r_max - self.r_min) * i as f64 / (layers - 1) as f64)
            .collect()
    }

    fn cells(&self, phi: f64, z: f64) -> (i64, i64) {
        let u = ((phi + PI) / (2.0 * PI) * self.phi_cells as f64) as i64;
        let v = ((z + self.z_max) / (2.0 * self.z_max) * self.z_cells as f64) as i64;
        (u.min(self.phi_cells as i64 - 1), v.clamp(0, self.z_cells as i64 - 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub n_particles: usize,
    pub layers: usize,
    /// Fraction of all hits that are noise.
    pub noise_frac: f64,
    pub eta_max: f64,
    /// Half-width of the uniform longitudinal vertex spread, mm.
    pub z0_spread: f64,
    pub detector: Detector,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            n_particles: 540,
            layers: 10,
            noise_frac: 0.1,
            eta_max: 1.5,
            z0_spread: 50.0,
            detector: Detector::default(),
        }
    }
}

impl TrackingConfig {
    /// Named dataset scales: `tracking-6k`, `tracking-15k`, `tracking-60k`
    /// and the 200-hit `toy` (10 tracks over 20 layers, no noise).
    pub fn preset(name: &str) -> Result<Self> {
        let n_particles = match name {
            "tracking-6k" => 540,
            "tracking-15k" => 1350,
            "tracking-60k" => 5400,
            "toy" => {
                return Ok(Self {
                    n_particles: 10,
                    layers: 20,
                    noise_frac: 0.0,
                    ..Self::default()
                })
            }
            other => return Err(Error::Config(format!("unknown tracking preset {other:?}"))),
        };
        Ok(Self {
            n_particles,
            ..Self::default()
        })
    }
}

/// Transverse helix radius in mm.
fn helix_radius(pt: f64) -> f64 {
    1000.0 * pt / (0.3 * B_FIELD_T)
}

/// Ideal crossing `(φ, z)` of a particle from `(0, 0, z0)` with the cylinder
/// of radius `rho`, or `None` if the helix never reaches it.
pub fn helix_position(pt: f64, phi0: f64, eta: f64, charge: f64, z0: f64, rho: f64) -> Option<(f64, f64)> {
    let big_r = helix_radius(pt);
    let ratio = rho / (2.0 * big_r);
    if ratio >= 1.0 {
        return None;
    }
    let half = ratio.asin();
    let phi = wrap_phi(phi0 - charge * half);
    let arc = 2.0 * big_r * half;
    Some((phi, z0 + arc * eta.sinh()))
}

/// Drops non-noise hits whose particle has `pt <= threshold`.
pub fn filter_pt(event: &mut TrackingEvent, threshold: f64) {
    event.hits.retain(|h| h.is_noise() || h.pt > threshold);
    let mut ids: Vec<i64> = event.hits.iter().filter(|h| !h.is_noise()).map(|h| h.particle_id).collect();
    ids.sort_unstable();
    ids.dedup();
    event.n_particles = ids.len();
}

/// Helix tracks from the origin crossing barrel layers, with Gaussian
/// smearing along `rφ` and `z`, plus uniform noise. Hits are sorted by layer
/// then φ and numbered from 1.
pub fn generate_tracking_event(seed: u64, event_id: u64, cfg: &TrackingConfig) -> Result<TrackingEvent> {
    if cfg.n_particles == 0 {
        return Err(Error::InvalidArgument("n_particles must be at least 1".into()));
    }
    if cfg.layers < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 layers, got {}", cfg.layers)));
    }
    if !(0.0..1.0).contains(&cfg.noise_frac) {
        return Err(Error::InvalidArgument(format!("noise_frac {} outside [0, 1)", cfg.noise_frac)));
    }
    let det = &cfg.detector;
    if !(det.sigma >= 0.0 && det.r_min > 0.0 && det.r_max > det.r_min && det.z_max > 0.0) {
        return Err(Error::InvalidArgument("invalid detector geometry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let smear = Normal::new(0.0, det.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let radii = det.radii(cfg.layers);
    let mut hits = Vec::new();
    for pid in 0..cfg.n_particles {
        let pt = (PT_MIN.ln() + rng.gen::<f64>() * (PT_MAX / PT_MIN).ln()).exp();
        let phi0 = rng.gen_range(-PI..PI);
        let eta = rng.gen_range(-cfg.eta_max..=cfg.eta_max);
        let charge = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let z0 = rng.gen_range(-cfg.z0_spread..=cfg.z0_spread);
        for (layer, &rho) in radii.iter().enumerate() {
            let Some((phi, z)) = helix_position(pt, phi0, eta, charge, z0, rho) else {
                break;
            };
            let phi = wrap_phi(phi + smear.sample(&mut rng) / rho);
            let z = z + smear.sample(&mut rng);
            if z.abs() > det.z_max {
                continue;
            }
            hits.push(make_hit(det, rho, phi, z, layer as u32, pid as i64, pt));
        }
    }
    let n_signal = hits.len();
    let n_noise = (cfg.noise_frac * n_signal as f64 / (1.0 - cfg.noise_frac)).round() as usize;
    for _ in 0..n_noise {
        let layer = rng.gen_range(0..radii.len());
        let phi = rng.gen_range(-PI..PI);
        let z = rng.gen_range(-det.z_max..det.z_max);
        hits.push(make_hit(det, radii[layer], phi, z, layer as u32, -1, 0.0));
    }
    hits.sort_by(|a, b| {
        a.layer
            .cmp(&b.layer)
            .then(a.phi().total_cmp(&b.phi()))
            .then(a.particle_id.cmp(&b.particle_id))
    });
    for (i, h) in hits.iter_mut().enumerate() {
        h.hit_id = i as u64 + 1;
    }
    let mut event = TrackingEvent {
        event_id,
        seed: Some(seed),
        n_particles: cfg.n_particles,
        hits,
    };
    filter_pt(&mut event, PT_MIN);
    Ok(event)
}

fn make_hit(det: &Detector, rho: f64, phi: f64, z: f64, layer: u32, particle_id: i64, pt: f64) -> Hit {
    let (x, y, z) = to_cartesian(rho, phi, z);
    let (local_u, local_v) = det.cells(phi, z);
    Hit {
        hit_id: 0,
        x,
        y,
        z,
        layer,
        local_u,
        local_v,
        particle_id,
        pt,
    }
}
