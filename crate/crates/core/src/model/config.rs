use serde::{Deserialize, Serialize};

use crate::attention::AttentionKernel;
use crate::data::{N_PID_CODES, PILEUP_SCALARS, TRACKING_FEATURES};
use crate::error::{Error, Result};
use crate::lsh::LshConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Mamba layers over the input order, no hashing.
    MambaPlain,
    /// Mamba layer followed by bucketed attention, re-hashed every layer.
    MambaA,
    /// One hashing pass; layer `i` scans in the order of table `i mod m1`.
    MambaB,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::MambaPlain => "mamba_plain",
            Arch::MambaA => "mamba_a",
            Arch::MambaB => "mamba_b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mamba_plain" | "mamba" => Ok(Arch::MambaPlain),
            "mamba_a" => Ok(Arch::MambaA),
            "mamba_b" => Ok(Arch::MambaB),
            other => Err(Error::Config(format!("unknown arch {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Tracking,
    Pileup,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Tracking => "tracking",
            Task::Pileup => "pileup",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tracking" => Ok(Task::Tracking),
            "pileup" => Ok(Task::Pileup),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    #[serde(alias = "s")]
    S,
    #[serde(alias = "m")]
    M,
    #[serde(alias = "l")]
    L,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::S => "S",
            Scale::M => "M",
            Scale::L => "L",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Scale::S),
            "M" | "m" => Ok(Scale::M),
            "L" | "l" => Ok(Scale::L),
            other => Err(Error::Config(format!("unknown scale {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub task: Task,
    /// Per-point input features (tracking) or scalar features (pileup).
    pub input_dim: usize,
    pub coord_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Output width of the tracking head; the pileup head always emits one logit.
    pub embed_out_dim: usize,
    pub block_size: usize,
    pub lsh: LshConfig,
    pub conv_width: usize,
    pub expand: usize,
    pub d_state: usize,
    /// Rank of the Δ projection; `None` is `ceil(hidden_dim / 16)`.
    pub dt_rank: Option<usize>,
    pub pid_embed_dim: usize,
    pub n_pid_codes: usize,
    pub reset_state_at_block: bool,
    /// Mamba-a: hash once at the first layer and reuse the buckets.
    pub reuse_assignment: bool,
    /// Replace every Mamba block by the identity (permutation sanity checks).
    pub bypass_blocks: bool,
    pub kernel: AttentionKernel,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::MambaB,
            task: Task::Tracking,
            input_dim: TRACKING_FEATURES,
            coord_dim: 2,
            hidden_dim: 24,
            n_layers: 4,
            embed_out_dim: 24,
            block_size: 100,
            lsh: LshConfig::default(),
            conv_width: 4,
            expand: 2,
            d_state: 16,
            dt_rank: None,
            pid_embed_dim: 8,
            n_pid_codes: N_PID_CODES,
            reset_state_at_block: false,
            reuse_assignment: false,
            bypass_blocks: false,
            kernel: AttentionKernel::DotProduct,
            seed: 0,
        }
    }
}

/// Block-size candidates per dataset and bucketed architecture. The first
/// entry is the default.
pub fn block_size_grid(dataset: &str, arch: Arch) -> Result<&'static [usize]> {
    let (a, b): (&'static [usize], &'static [usize]) = match dataset {
        "tracking-6k" | "toy" => (&[20, 40], &[100, 120]),
        "tracking-15k" => (&[60, 80, 100], &[150, 200, 250]),
        "tracking-60k" => (&[140, 150, 160], &[200, 250, 300]),
        "pileup-10k" | "pileup" => (&[100, 120, 140], &[100, 150, 200]),
        other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
    };
    Ok(match arch {
        Arch::MambaA => a,
        Arch::MambaB | Arch::MambaPlain => b,
    })
}

impl ModelConfig {
    /// Named sizes. Tracking presets scale by `(hidden_dim, n_layers, expand)`;
    /// pileup presets are `{24, 8}` for Mamba-a and `{48, 8}` otherwise.
    pub fn preset(arch: Arch, scale: Scale, task: Task) -> Self {
        let (hidden_dim, n_layers, expand) = match (task, arch, scale) {
            (Task::Pileup, Arch::MambaA, _) => (24, 8, 2),
            (Task::Pileup, _, _) => (48, 8, 2),
            (Task::Tracking, Arch::MambaA, Scale::S) => (24, 8, 6),
            (Task::Tracking, Arch::MambaA, Scale::M) => (48, 12, 2),
            (Task::Tracking, Arch::MambaA, Scale::L) => (48, 12, 3),
            (Task::Tracking, _, Scale::S) => (24, 12, 8),
            (Task::Tracking, _, Scale::M) => (48, 12, 5),
            (Task::Tracking, _, Scale::L) => (48, 12, 8),
        };
        let dataset = match task {
            Task::Tracking => "tracking-6k",
            Task::Pileup => "pileup-10k",
        };
        Self {
            arch,
            task,
            input_dim: match task {
                Task::Tracking => TRACKING_FEATURES,
                Task::Pileup => PILEUP_SCALARS,
            },
            hidden_dim,
            n_layers,
            expand,
            block_size: block_size_grid(dataset, arch).expect("known dataset")[0],
            ..Self::default()
        }
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.hidden_dim.div_ceil(16))
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Tracking => self.embed_out_dim,
            Task::Pileup => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("coord_dim", self.coord_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_out_dim", self.embed_out_dim),
            ("block_size", self.block_size),
            ("conv_width", self.conv_width),
            ("expand", self.expand),
            ("d_state", self.d_state),
            ("dt_rank", self.dt_rank()),
            ("lsh.m1", self.lsh.m1),
            ("lsh.m2", self.lsh.m2),
            ("lsh.n_regions", self.lsh.n_regions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.task == Task::Pileup && (self.pid_embed_dim == 0 || self.n_pid_codes == 0) {
            return Err(Error::Config("pileup needs a particle-ID embedding".into()));
        }
        if let Some(r) = self.lsh.bucket_width {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("bucket_width {r} must be positive")));
            }
        }
        Ok(())
    }
}
