use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::wrap_phi;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Particle-type codes: 0 photon, 1 electron, 2 muon, 3 pion, 4 kaon,
/// 5 proton, 6 neutron, 7 neutral kaon.
pub const N_PID_CODES: usize = 8;
const CHARGED_CODES: [i64; 5] = [1, 2, 3, 4, 5];
const NEUTRAL_CODES: [i64; 3] = [0, 6, 7];

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub particle_id_code: i64,
    pub eta: f64,
    pub phi: f64,
    pub pt: f64,
    pub energy: f64,
    pub charge: f64,
    /// Reconstructed vertex: 0 for the leading vertex, `k > 0` for pileup
    /// vertex `k`, `-1` when unknown (neutral particles).
    pub vertex: i64,
    /// From the leading vertex.
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PileupEvent {
    pub event_id: u64,
    pub seed: Option<u64>,
    pub particles: Vec<Particle>,
}

impl PileupEvent {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.particles.iter().map(|p| p.label).collect()
    }

    pub fn pid_codes(&self) -> Vec<i64> {
        self.particles.iter().map(|p| p.particle_id_code).collect()
    }

    /// Per-particle `[log pT, log E, charge, vertex tag]` where the tag is
    /// +1 for the leading vertex, -1 for pileup and 0 when unknown.
    pub fn scalar_features(&self) -> Result<Tensor<f64>> {
        let data = self
            .particles
            .iter()
            .flat_map(|p| {
                let tag = match p.vertex {
                    0 => 1.0,
                    v if v > 0 => -1.0,
                    _ => 0.0,
                };
                [p.pt.ln(), p.energy.ln(), p.charge, tag]
            })
            .collect();
        Tensor::new([self.particles.len(), PILEUP_SCALARS], data)
    }

    /// `[η, φ]`.
    pub fn coords(&self) -> Result<Tensor<f64>> {
        let data = self.particles.iter().flat_map(|p| [p.eta, p.phi]).collect();
        Tensor::new([self.particles.len(), 2], data)
    }
}

pub const PILEUP_SCALARS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PileupConfig {
    pub n_particles: usize,
    pub charged_frac: f64,
    /// Fraction of particles from the leading vertex.
    pub lv_frac: f64,
    pub n_pileup_vertices: usize,
    /// Jets (Gaussian η-φ blobs) per leading vertex.
    pub lv_blobs: usize,
    /// Blobs per pileup vertex.
    pub pu_blobs: usize,
    pub eta_max: f64,
}

impl Default for PileupConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            charged_frac: 0.6,
            lv_frac: 0.1,
            n_pileup_vertices: 140,
            lv_blobs: 4,
            pu_blobs: 2,
            eta_max: 2.5,
        }
    }
}

struct Blob {
    eta: f64,
    phi: f64,
    width: f64,
}

/// Particles from one leading vertex and many pileup vertices. Each vertex
/// emits into a few Gaussian η-φ blobs; the leading vertex's blobs are
/// narrower and harder. Charged particles carry their true vertex, so their
/// label is a function of it; neutral ones carry no vertex and are only
/// separable through their neighbourhood.
pub fn generate_pileup_event(seed: u64, event_id: u64, cfg: &PileupConfig) -> Result<PileupEvent> {
    if cfg.n_particles == 0 {
        return Err(Error::InvalidArgument("n_particles must be at least 1".into()));
    }
    for (name, f) in [("charged_frac", cfg.charged_frac), ("lv_frac", cfg.lv_frac)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("{name} {f} outside [0, 1]")));
        }
    }
    if cfg.n_pileup_vertices == 0 || cfg.lv_blobs == 0 || cfg.pu_blobs == 0 {
        return Err(Error::InvalidArgument("vertex and blob counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = |n: usize, width: f64, rng: &mut ChaCha8Rng| -> Vec<Blob> {
        (0..n)
            .map(|_| Blob {
                eta: rng.gen_range(-cfg.eta_max..cfg.eta_max),
                phi: rng.gen_range(-PI..PI),
                width,
            })
            .collect()
    };
    let lv = blobs(cfg.lv_blobs, 0.3, &mut rng);
    let pu: Vec<Vec<Blob>> = (0..cfg.n_pileup_vertices).map(|_| blobs(cfg.pu_blobs, 0.8, &mut rng)).collect();
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let lv_pt = Exp::new(1.0 / 3.0).expect("valid");
    let pu_pt = Exp::new(1.0 / 0.8).expect("valid");
    let mut particles = Vec::with_capacity(cfg.n_particles);
    for _ in 0..cfg.n_particles {
        let from_lv = rng.gen::<f64>() < cfg.lv_frac;
        let charged = rng.gen::<f64>() < cfg.charged_frac;
        let (vertex, blob) = if from_lv {
            (0, &lv[rng.gen_range(0..lv.len())])
        } else {
            let v = rng.gen_range(0..pu.len());
            (v as i64 + 1, &pu[v][rng.gen_range(0..cfg.pu_blobs)])
        };
        let eta = (blob.eta + blob.width * unit.sample(&mut rng)).clamp(-cfg.eta_max, cfg.eta_max);
        let phi = wrap_phi(blob.phi + blob.width * unit.sample(&mut rng));
        let pt = 0.1 + if from_lv { lv_pt.sample(&mut rng) } else { pu_pt.sample(&mut rng) };
        let (code, charge) = if charged {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (CHARGED_CODES[rng.gen_range(0..CHARGED_CODES.len())], sign)
        } else {
            (NEUTRAL_CODES[rng.gen_range(0..NEUTRAL_CODES.len())], 0.0)
        };
        particles.push(Particle {
            particle_id_code: code,
            eta,
            phi,
            pt,
            energy: pt * eta.cosh(),
            charge,
            vertex: if charged { vertex } else { -1 },
            label: from_lv,
        });
    }
    Ok(PileupEvent {
        event_id,
        seed: Some(seed),
        particles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_leading_vertex() {
        let cfg = PileupConfig { n_particles: 500, lv_frac: 1.0, ..PileupConfig::default() };
        let ev = generate_pileup_event(1, 0, &cfg).unwrap();
        assert!(ev.particles.iter().all(|p| p.label));
    }

    #[test]
    fn label_balance_within_three_sigma() {
        for (lv, ch) in [(0.1, 0.6), (0.5, 0.3), (0.3, 0.9)] {
            let cfg = PileupConfig { n_particles: 10_000, lv_frac: lv, charged_frac: ch, ..PileupConfig::default() };
            let ev = generate_pileup_event(7, 0, &cfg).unwrap();
            let n = ev.len() as f64;
            let pos = ev.particles.iter().filter(|p| p.label).count() as f64;
            let chg = ev.particles.iter().filter(|p| p.charge != 0.0).count() as f64;
            assert!((pos - lv * n).abs() <= 3.0 * (n * lv * (1.0 - lv)).sqrt());
            assert!((chg - ch * n).abs() <= 3.0 * (n * ch * (1.0 - ch)).sqrt());
        }
    }

    #[test]
    fn charged_labels_follow_vertex() {
        let ev = generate_pileup_event(2, 0, &PileupConfig { n_particles: 2000, ..PileupConfig::default() }).unwrap();
        for p in &ev.particles {
            if p.charge != 0.0 {
                assert_eq!(p.label, p.vertex == 0);
                assert!(CHARGED_CODES.contains(&p.particle_id_code));
            } else {
                assert_eq!(p.vertex, -1);
                assert!(NEUTRAL_CODES.contains(&p.particle_id_code));
            }
            assert!(p.pt > 0.0 && p.energy >= p.pt && p.phi > -PI && p.phi <= PI);
        }
        assert_eq!(ev.scalar_features().unwrap().shape(), &[2000, PILEUP_SCALARS]);
    }

    #[test]
    fn invalid_fractions() {
        let bad = PileupConfig { lv_frac: 1.5, ..PileupConfig::default() };
        assert!(generate_pileup_event(0, 0, &bad).is_err());
        let bad = PileupConfig { charged_frac: -0.1, ..PileupConfig::default() };
        assert!(generate_pileup_event(0, 0, &bad).is_err());
    }
}
