//! Mamba blocks, the plain / hybrid (Mamba-a) / LSH-reordered (Mamba-b)
//! backbones, input embeddings and output heads.

mod checkpoint;
mod config;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{block_size_grid, Arch, ModelConfig, Scale, Task};

use crate::attention::bucketed_attention_var;
use crate::data::{PileupEvent, TrackingEvent};
use crate::error::{shape_err, Error, Result};
use crate::lsh::{assign_buckets, BucketAssignment, HashEnsemble};
use crate::numeric::{sigmoid, Scalar, Tape, Tensor, Var};
use crate::ssm::{inverse_softplus, scan_var};

const LN_EPS: f64 = 1e-5;
/// Highest positional-encoding frequency.
const POSENC_MAX_FREQ: f64 = 32.0;

/// Per-point inputs of one event.
#[derive(Clone, Debug)]
pub struct PointBatch<T: Scalar> {
    /// `n × input_dim`.
    pub features: Tensor<T>,
    /// `n × coord_dim`, used for hashing and positional encoding.
    pub coords: Tensor<T>,
    /// Particle-ID indices (pileup only).
    pub pid: Option<Vec<usize>>,
}

impl<T: Scalar> PointBatch<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_tracking(ev: &TrackingEvent) -> Result<Self> {
        Ok(Self {
            features: ev.features()?.cast(),
            coords: ev.coords()?.cast(),
            pid: None,
        })
    }

    pub fn from_pileup(ev: &PileupEvent) -> Result<Self> {
        let pid = ev
            .pid_codes()
            .into_iter()
            .map(|c| usize::try_from(c).map_err(|_| Error::InvalidArgument(format!("particle-ID code {c}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            features: ev.scalar_features()?.cast(),
            coords: ev.coords()?.cast(),
            pid: Some(pid),
        })
    }

    /// Rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.gather_rows(perm)?,
            coords: self.coords.gather_rows(perm)?,
            pid: self.pid.as_ref().map(|p| perm.iter().map(|&i| p[i]).collect()),
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
    Normal,
    /// `softplus⁻¹(Δ)` with `Δ` log-uniform in `[1e-3, 1e-1]`.
    DtBias,
    /// `ln(1..=N)` along each row.
    ALog,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    /// `[in, out]`.
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    norm: Norm,
    in_proj: usize,
    conv_w: usize,
    conv_b: usize,
    x_proj: usize,
    dt: Linear,
    a_log: usize,
    d_skip: usize,
    out_proj: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    block: BlockIdx,
    attn: Option<AttnIdx>,
}

#[derive(Clone, Copy, Debug)]
struct PidIdx {
    table: usize,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    pid: Option<PidIdx>,
    in1: Linear,
    in2: Linear,
    layers: Vec<LayerIdx>,
    head_proj: Linear,
    head_norm: Norm,
    head1: Linear,
    head2: Linear,
}

#[derive(Default)]
struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{name}.w"), vec![fan_in, fan_out], Init::Uniform(bound));
        let b = bias.then(|| self.add(format!("{name}.b"), vec![fan_out], Init::Zeros));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig) -> BlockIdx {
        let (d, e, n, r, k) = (cfg.hidden_dim, cfg.inner_dim(), cfg.d_state, cfg.dt_rank(), cfg.conv_width);
        let norm = self.norm(&format!("{name}.norm"), d);
        let in_proj = self.linear(&format!("{name}.in_proj"), d, 2 * e, false).w;
        let conv_w = self.add(format!("{name}.conv.w"), vec![e, k], Init::Uniform(1.0 / (k as f64).sqrt()));
        let conv_b = self.add(format!("{name}.conv.b"), vec![e], Init::Zeros);
        let x_proj = self.linear(&format!("{name}.x_proj"), e, r + 2 * n, false).w;
        let dt_w = self.add(format!("{name}.dt.w"), vec![r, e], Init::Uniform(1.0 / (r as f64).sqrt()));
        let dt_b = self.add(format!("{name}.dt.b"), vec![e], Init::DtBias);
        let a_log = self.add(format!("{name}.a_log"), vec![e, n], Init::ALog);
        let d_skip = self.add(format!("{name}.d"), vec![e], Init::Ones);
        let out_proj = self.linear(&format!("{name}.out_proj"), e, d, false).w;
        BlockIdx {
            norm,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt: Linear { w: dt_w, b: Some(dt_b) },
            a_log,
            d_skip,
            out_proj,
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttnIdx {
        AttnIdx {
            norm: self.norm(&format!("{name}.norm"), d),
            q: self.linear(&format!("{name}.q"), d, d, true),
            k: self.linear(&format!("{name}.k"), d, d, true),
            v: self.linear(&format!("{name}.v"), d, d, true),
            o: self.linear(&format!("{name}.o"), d, d, true),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let mut b = Builder::default();
    let d = cfg.hidden_dim;
    let (pid, in_dim) = match cfg.task {
        Task::Tracking => (None, cfg.input_dim),
        Task::Pileup => {
            let table = b.add("pid.table".into(), vec![cfg.n_pid_codes, cfg.pid_embed_dim], Init::Normal);
            let proj = b.linear("pid.proj", cfg.pid_embed_dim, d, true);
            (Some(PidIdx { table, proj }), d + cfg.input_dim)
        }
    };
    let in1 = b.linear("input.0", in_dim, d, true);
    let in2 = b.linear("input.1", d, d, true);
    let layers = (0..cfg.n_layers)
        .map(|i| LayerIdx {
            block: b.block(&format!("layer{i}.mamba"), cfg),
            attn: (cfg.arch == Arch::MambaA).then(|| b.attention(&format!("layer{i}.attn"), d)),
        })
        .collect();
    let head_proj = b.linear("head.proj", d, d, false);
    let head_norm = b.norm("head.norm", d);
    let head1 = b.linear("head.0", d, d, true);
    let head2 = b.linear("head.1", d, cfg.output_dim(), true);
    let layout = Layout {
        pid,
        in1,
        in2,
        layers,
        head_proj,
        head_norm,
        head1,
        head2,
    };
    (layout, b.specs)
}

impl ModelConfig {
    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        build_layout(self).1.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

fn init_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let cols = shape.last().copied().unwrap_or(1);
    Tensor::from_fn(shape.to_vec(), |i| {
        T::lit(match init {
            Init::Uniform(b) => rng.gen_range(-b..b),
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Normal => rng.sample(StandardNormal),
            Init::DtBias => {
                let dt = (1e-3f64.ln() + rng.gen::<f64>() * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                inverse_softplus(dt)
            }
            Init::ALog => ((i % cols) as f64 + 1.0).ln(),
        })
    })
}

/// Sinusoidal encoding of each coordinate at geometrically spaced
/// frequencies from 1 to 32; columns beyond `2 · coord_dim · pairs` are zero.
pub fn positional_encoding<T: Scalar>(coords: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
    let (n, c) = (coords.rows(), coords.cols());
    let pairs = dim / (2 * c.max(1));
    let freq = |k: usize| {
        if pairs <= 1 {
            1.0
        } else {
            POSENC_MAX_FREQ.powf(k as f64 / (pairs - 1) as f64)
        }
    };
    let mut out = vec![T::zero(); n * dim];
    for p in 0..n {
        for j in 0..c {
            let x = coords.at(p, j).as_f64();
            for k in 0..pairs {
                let col = 2 * (j * pairs + k);
                out[p * dim + col] = T::lit((freq(k) * x).sin());
                out[p * dim + col + 1] = T::lit((freq(k) * x).cos());
            }
        }
    }
    Tensor::new([n, dim], out)
}

/// Parameters plus hash ensembles for one configuration.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
    ensembles: Vec<HashEnsemble<T>>,
}

/// Bucket assignments produced during a forward pass, in layer order.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub assignments: Vec<Rc<BucketAssignment>>,
}

struct Ctx<'a, T: Scalar> {
    tape: &'a Tape<T>,
    p: &'a [Var<T>],
}

impl<T: Scalar> Ctx<'_, T> {
    fn linear(&self, x: &Var<T>, l: Linear) -> Result<Var<T>> {
        let y = self.tape.matmul(x, &self.p[l.w])?;
        match l.b {
            Some(b) => self.tape.add_row(&y, &self.p[b]),
            None => Ok(y),
        }
    }

    fn norm(&self, x: &Var<T>, n: Norm) -> Result<Var<T>> {
        let y = self.tape.layer_norm(x, T::lit(LN_EPS))?;
        let y = self.tape.mul_row(&y, &self.p[n.gain])?;
        self.tape.add_row(&y, &self.p[n.bias])
    }

    /// Two linear layers with a SiLU in between.
    fn mlp(&self, x: &Var<T>, a: Linear, b: Linear) -> Result<Var<T>> {
        let h = self.tape.silu(&self.linear(x, a)?)?;
        self.linear(&h, b)
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            params.push(init_tensor(&shape, init, &mut rng)?);
            names.push(name);
        }
        let feature_dim = if config.lsh.coords_only { 0 } else { config.hidden_dim };
        let n_ens = match config.arch {
            Arch::MambaPlain => 0,
            Arch::MambaA => config.n_layers,
            Arch::MambaB => 1,
        };
        let ensembles = (0..n_ens)
            .map(|i| {
                let seed = config.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1));
                HashEnsemble::new(config.lsh.clone(), feature_dim, config.coord_dim, seed)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            names,
            params,
            layout,
            ensembles,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Replaces every parameter; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return shape_err("set_params", format!("{} tensors for {} parameters", params.len(), self.params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// The same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut m = Model::<U>::new(self.config.clone())?;
        m.params = self.params.iter().map(Tensor::cast).collect();
        Ok(m)
    }

    /// Registers every parameter as a trainable leaf.
    pub fn vars(&self, tape: &Tape<T>) -> Vec<Var<T>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Per-point outputs: embeddings (tracking) or logits (pileup).
    pub fn forward(&self, tape: &Tape<T>, params: &[Var<T>], batch: &PointBatch<T>) -> Result<Var<T>> {
        self.forward_traced(tape, params, batch).map(|(y, _)| y)
    }

    pub fn forward_traced(
        &self,
        tape: &Tape<T>,
        params: &[Var<T>],
        batch: &PointBatch<T>,
    ) -> Result<(Var<T>, ForwardTrace)> {
        if params.len() != self.params.len() {
            return shape_err("forward", format!("{} parameter vars, model has {}", params.len(), self.params.len()));
        }
        self.check_batch(batch)?;
        let ctx = Ctx { tape, p: params };
        let mut trace = ForwardTrace::default();
        let mut x = self.embed_inputs(&ctx, batch)?;
        match self.config.arch {
            Arch::MambaPlain => {
                for layer in &self.layout.layers {
                    x = self.mamba_block(&ctx, &x, layer.block, None)?;
                }
            }
            Arch::MambaA => {
                for (i, layer) in self.layout.layers.iter().enumerate() {
                    x = self.mamba_block(&ctx, &x, layer.block, None)?;
                    let assignment = match trace.assignments.first() {
                        Some(a) if self.config.reuse_assignment => Rc::clone(a),
                        _ => Rc::new(self.hash(&self.ensembles[i], x.value(), &batch.coords)?),
                    };
                    trace.assignments.push(Rc::clone(&assignment));
                    let attn = layer.attn.expect("mamba_a layers carry attention");
                    x = self.attention_layer(&ctx, &x, attn, assignment)?;
                }
            }
            Arch::MambaB => {
                if !self.layout.layers.is_empty() {
                    let assignment = Rc::new(self.hash(&self.ensembles[0], x.value(), &batch.coords)?);
                    trace.assignments.push(Rc::clone(&assignment));
                    for (i, layer) in self.layout.layers.iter().enumerate() {
                        let table = &assignment.tables[i % assignment.m1()];
                        let resets = self.config.reset_state_at_block.then(|| {
                            let mut r = vec![false; table.order.len()];
                            for b in &table.buckets {
                                r[b.start] = true;
                            }
                            Rc::new(r)
                        });
                        let sorted = tape.gather_rows(&x, &table.order)?;
                        let y = self.mamba_block(&ctx, &sorted, layer.block, resets)?;
                        x = tape.gather_rows(&y, &table.inverse)?;
                    }
                }
            }
        }
        let l = &self.layout;
        let h = ctx.linear(&x, l.head_proj)?;
        let h = ctx.norm(&h, l.head_norm)?;
        Ok((ctx.mlp(&h, l.head1, l.head2)?, trace))
    }

    /// Forward pass without gradient recording.
    pub fn infer(&self, batch: &PointBatch<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let vars = self.vars(&tape);
        Ok(self.forward(&tape, &vars, batch)?.value().clone())
    }

    /// Pileup probabilities `sigmoid(logit)`, one per particle.
    pub fn predict_proba(&self, batch: &PointBatch<T>) -> Result<Vec<T>> {
        if self.config.task != Task::Pileup {
            return Err(Error::InvalidArgument("predict_proba needs a pileup model".into()));
        }
        Ok(self.infer(batch)?.data().iter().map(|&z| sigmoid(z)).collect())
    }

    fn check_batch(&self, batch: &PointBatch<T>) -> Result<()> {
        let n = batch.features.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.features.ndim() != 2 || batch.features.cols() != self.config.input_dim {
            return shape_err(
                "forward",
                format!("features {:?}, expected [n, {}]", batch.features.shape(), self.config.input_dim),
            );
        }
        if batch.coords.shape() != [n, self.config.coord_dim] {
            return shape_err(
                "forward",
                format!("coords {:?}, expected [{n}, {}]", batch.coords.shape(), self.config.coord_dim),
            );
        }
        if batch.features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "forward input" });
        }
        if self.config.task == Task::Pileup {
            let pid = batch
                .pid
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("pileup batch without particle IDs".into()))?;
            if pid.len() != n {
                return shape_err("forward", format!("{} particle IDs for {n} points", pid.len()));
            }
            if let Some(&bad) = pid.iter().find(|&&c| c >= self.config.n_pid_codes) {
                return Err(Error::InvalidArgument(format!(
                    "particle-ID index {bad} outside 0..{}",
                    self.config.n_pid_codes
                )));
            }
        }
        Ok(())
    }

    fn embed_inputs(&self, ctx: &Ctx<'_, T>, batch: &PointBatch<T>) -> Result<Var<T>> {
        let tape = ctx.tape;
        let feats = tape.constant(batch.features.clone());
        let input = match (self.layout.pid, &batch.pid) {
            (Some(pid), Some(codes)) => {
                let e = tape.gather_rows(&ctx.p[pid.table], codes)?;
                let e = ctx.linear(&e, pid.proj)?;
                let pos = tape.constant(positional_encoding(&batch.coords, self.config.hidden_dim)?);
                tape.concat_cols(&tape.add(&e, &pos)?, &feats)?
            }
            _ => feats,
        };
        ctx.mlp(&input, self.layout.in1, self.layout.in2)
    }

    fn hash(&self, ens: &HashEnsemble<T>, hidden: &Tensor<T>, coords: &Tensor<T>) -> Result<BucketAssignment> {
        assign_buckets(Some(hidden), coords, ens, self.config.block_size)
    }

    /// Pre-norm Mamba layer with residual: `x + out(y · silu(z))` where `y` is
    /// the selective scan of the convolved branch.
    fn mamba_block(&self, ctx: &Ctx<'_, T>, x: &Var<T>, b: BlockIdx, resets: Option<Rc<Vec<bool>>>) -> Result<Var<T>> {
        if self.config.bypass_blocks {
            return Ok(x.clone());
        }
        let tape = ctx.tape;
        let (e, n, r) = (self.config.inner_dim(), self.config.d_state, self.config.dt_rank());
        let h = ctx.norm(x, b.norm)?;
        let xz = tape.matmul(&h, &ctx.p[b.in_proj])?;
        let xs = tape.slice_cols(&xz, 0, e)?;
        let z = tape.slice_cols(&xz, e, 2 * e)?;
        let xc = tape.silu(&tape.causal_conv1d(&xs, &ctx.p[b.conv_w], &ctx.p[b.conv_b])?)?;
        let dbc = tape.matmul(&xc, &ctx.p[b.x_proj])?;
        let dt_in = tape.slice_cols(&dbc, 0, r)?;
        let bm = tape.slice_cols(&dbc, r, r + n)?;
        let cm = tape.slice_cols(&dbc, r + n, r + 2 * n)?;
        let delta = tape.softplus(&ctx.linear(&dt_in, b.dt)?)?;
        let a = tape.scale(&tape.exp(&ctx.p[b.a_log])?, -T::one())?;
        let y = scan_var(tape, &xc, &delta, &a, &bm, &cm, &ctx.p[b.d_skip], resets)?;
        let y = tape.mul(&y, &tape.silu(&z)?)?;
        let out = tape.matmul(&y, &ctx.p[b.out_proj])?;
        tape.add(x, &out)
    }

    fn attention_layer(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Var<T>,
        a: AttnIdx,
        assignment: Rc<BucketAssignment>,
    ) -> Result<Var<T>> {
        let h = ctx.norm(x, a.norm)?;
        let q = ctx.linear(&h, a.q)?;
        let k = ctx.linear(&h, a.k)?;
        let v = ctx.linear(&h, a.v)?;
        let att = bucketed_attention_var(ctx.tape, &q, &k, &v, assignment, self.config.kernel)?;
        ctx.tape.add(x, &ctx.linear(&att, a.o)?)
    }

    /// Output of the input embedding and the `i`-th Mamba block alone, for
    /// probing block-level properties.
    pub fn block_forward(&self, tape: &Tape<T>, params: &[Var<T>], layer: usize, x: &Var<T>) -> Result<Var<T>> {
        let l = self
            .layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} of {}", self.layout.layers.len())))?;
        if x.cols() != self.config.hidden_dim {
            return shape_err("mamba_block", format!("input {:?}, hidden_dim {}", x.shape(), self.config.hidden_dim));
        }
        self.mamba_block(&Ctx { tape, p: params }, x, l.block, None)
    }

    /// Indices of every parameter belonging to Mamba block `layer`.
    pub fn block_param_indices(&self, layer: usize) -> Vec<usize> {
        let prefix = format!("layer{layer}.mamba.");
        (0..self.names.len()).filter(|&i| self.names[i].starts_with(&prefix)).collect()
    }
}

#[cfg(test)]
mod tests;
