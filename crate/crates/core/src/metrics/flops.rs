use serde::Serialize;

use crate::model::{Arch, ModelConfig, Task};

/// How [`flops_estimate`] counts. One multiply-add is two FLOPs; elementwise
/// activations, normalisation and sorting are not counted.
pub const FLOPS_FORMULA_SHEET: &str = "\
per point, d = hidden_dim, E = expand*d, N = d_state, R = dt_rank, K = conv_width, o = output width
input     2*(d_in*d + d*d)            (+ 2*p*d particle-ID projection for pileup, d_in = d + scalars)
mamba     2*(2*d*E + K*E + E*(R+2N) + R*E + E*d) + 6*E*N   per layer
attention 8*d*d + 4*min(block_size, n)*d*m1                per mamba_a layer
hashing   2*m1*m2*(d + coord_dim)                          once (mamba_b) or per layer (mamba_a)
head      2*(d*d + d*d + d*o)
total     n * (input + layers + hashing + head)";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub input: u64,
    pub mamba: u64,
    pub attention: u64,
    pub hashing: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.input + self.mamba + self.attention + self.hashing + self.head
    }
}

/// Analytic FLOPs of one forward pass over `n` points, by component.
pub fn flops_breakdown(cfg: &ModelConfig, n: usize) -> FlopsBreakdown {
    let n = n as u64;
    let d = cfg.hidden_dim as u64;
    let e = cfg.inner_dim() as u64;
    let s = cfg.d_state as u64;
    let r = cfg.dt_rank() as u64;
    let k = cfg.conv_width as u64;
    let layers = cfg.n_layers as u64;
    let (m1, m2) = (cfg.lsh.m1 as u64, cfg.lsh.m2 as u64);
    let in_dim = match cfg.task {
        Task::Tracking => cfg.input_dim as u64,
        Task::Pileup => d + cfg.input_dim as u64,
    };
    let pid = match cfg.task {
        Task::Tracking => 0,
        Task::Pileup => 2 * cfg.pid_embed_dim as u64 * d,
    };
    let input = n * (2 * (in_dim * d + d * d) + pid);
    let block = 2 * (2 * d * e + k * e + e * (r + 2 * s) + r * e + e * d) + 6 * e * s;
    let mamba = n * layers * block;
    let hash_dim = if cfg.lsh.coords_only { 0 } else { d } + cfg.coord_dim as u64;
    let hash_once = n * 2 * m1 * m2 * hash_dim;
    let (attention, hashing) = match cfg.arch {
        Arch::MambaPlain => (0, 0),
        Arch::MambaB => (0, if layers > 0 { hash_once } else { 0 }),
        Arch::MambaA => {
            let bucket = (cfg.block_size as u64).min(n);
            let per_layer = n * (8 * d * d + 4 * bucket * d * m1);
            let hashes = if cfg.reuse_assignment { layers.min(1) } else { layers };
            (layers * per_layer, hashes * hash_once)
        }
    };
    let head = n * 2 * (2 * d * d + d * cfg.output_dim() as u64);
    FlopsBreakdown {
        input,
        mamba,
        attention,
        hashing,
        head,
    }
}

pub fn flops_estimate(cfg: &ModelConfig, n: usize) -> u64 {
    flops_breakdown(cfg, n).total()
}
