//! Structured state-space model math.
//!
//! Single-channel parameters use the time-varying form throughout: per step
//! `Δ_t`, diagonal `A` (negative), `B_t`, `C_t`. Discretisation is zero-order
//! hold for `Ā = exp(Δ A)` and Euler for `B̄ = Δ B`. The same input-output map
//! is available three ways: the left-to-right recurrence, the explicit
//! hidden-state expansion, and the lower-triangular semi-separable matrix.

use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numeric::{softplus, Scalar, Tape, Tensor, Var};

/// Continuous parameters of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T: Scalar> {
    delta: Vec<T>,
    a: Vec<T>,
    b: Tensor<T>,
    c: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    /// `delta: [T]`, `a: [N]`, `b, c: [T, N]`.
    pub fn new(delta: Vec<T>, a: Vec<T>, b: Tensor<T>, c: Tensor<T>) -> Result<Self> {
        let (t, n) = (delta.len(), a.len());
        if n == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if b.shape() != [t, n] || c.shape() != [t, n] {
            return shape_err(
                "SsmParams::new",
                format!("B {:?} and C {:?} must be [{t}, {n}]", b.shape(), c.shape()),
            );
        }
        if let Some(d) = delta.iter().find(|d| !(**d > T::zero()) || !d.is_finite()) {
            return Err(Error::Domain(format!("step size must be positive, got {d}")));
        }
        if let Some(v) = a.iter().find(|v| !(**v < T::zero()) || !v.is_finite()) {
            return Err(Error::Domain(format!("A entries must be negative, got {v}")));
        }
        Ok(Self { delta, a, b, c })
    }

    pub fn seq_len(&self) -> usize {
        self.delta.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn delta(&self) -> &[T] {
        &self.delta
    }

    pub fn a(&self) -> &[T] {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn c(&self) -> &Tensor<T> {
        &self.c
    }
}

/// Discretised parameters, both `[T, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsmParams<T: Scalar> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
}

impl<T: Scalar> DiscreteSsmParams<T> {
    pub fn new(a_bar: Tensor<T>, b_bar: Tensor<T>) -> Result<Self> {
        if a_bar.ndim() != 2 || a_bar.shape() != b_bar.shape() {
            return shape_err(
                "DiscreteSsmParams::new",
                format!("{:?} vs {:?}", a_bar.shape(), b_bar.shape()),
            );
        }
        Ok(Self { a_bar, b_bar })
    }

    pub fn seq_len(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.shape()[1]
    }
}

pub fn discretize<T: Scalar>(p: &SsmParams<T>) -> Result<DiscreteSsmParams<T>> {
    let (t_len, n) = (p.seq_len(), p.state_dim());
    let mut a_bar = Vec::with_capacity(t_len * n);
    let mut b_bar = Vec::with_capacity(t_len * n);
    for t in 0..t_len {
        let dt = p.delta[t];
        if !(dt > T::zero()) {
            return Err(Error::Domain(format!("step size must be positive, got {dt}")));
        }
        for i in 0..n {
            a_bar.push((dt * p.a[i]).exp());
            b_bar.push(dt * p.b.at(t, i));
        }
    }
    DiscreteSsmParams::new(Tensor::new([t_len, n], a_bar)?, Tensor::new([t_len, n], b_bar)?)
}

fn check_lengths<T: Scalar>(d: &DiscreteSsmParams<T>, c: Option<&Tensor<T>>, x: &[T]) -> Result<()> {
    if x.len() != d.seq_len() {
        return shape_err(
            "ssm",
            format!("input length {} vs sequence length {}", x.len(), d.seq_len()),
        );
    }
    if let Some(c) = c {
        if c.shape() != d.a_bar.shape() {
            return shape_err("ssm", format!("C {:?} vs {:?}", c.shape(), d.a_bar.shape()));
        }
    }
    Ok(())
}

/// All hidden states `h_t`, `[T, N]`, with `h_{-1} = 0`.
pub fn hidden_states<T: Scalar>(d: &DiscreteSsmParams<T>, x: &[T]) -> Result<Tensor<T>> {
    check_lengths(d, None, x)?;
    let n = d.state_dim();
    let mut h = vec![T::zero(); n];
    let mut out = Vec::with_capacity(x.len() * n);
    for (t, &xt) in x.iter().enumerate() {
        let (ab, bb) = (d.a_bar.row(t), d.b_bar.row(t));
        for i in 0..n {
            h[i] = ab[i] * h[i] + bb[i] * xt;
        }
        out.extend_from_slice(&h);
    }
    Tensor::new([x.len(), n], out)
}

/// `y_t = C_tᵀ h_t` with `h_t = Ā_t h_{t-1} + B̄_t x_t`, left to right.
pub fn recurrence<T: Scalar>(d: &DiscreteSsmParams<T>, c: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    check_lengths(d, Some(c), x)?;
    let h = hidden_states(d, x)?;
    Ok((0..x.len())
        .map(|t| h.row(t).iter().zip(c.row(t)).map(|(&h, &c)| h * c).sum())
        .collect())
}

/// `h_t = Σ_{s ≤ t} (Ā_t ⋯ Ā_{s+1}) B̄_s x_s`, evaluated term by term.
pub fn hidden_expansion<T: Scalar>(d: &DiscreteSsmParams<T>, x: &[T], t: usize) -> Result<Vec<T>> {
    check_lengths(d, None, x)?;
    if t >= d.seq_len() {
        return Err(Error::InvalidArgument(format!(
            "step {t} out of range for length {}",
            d.seq_len()
        )));
    }
    let n = d.state_dim();
    let mut h = vec![T::zero(); n];
    for s in 0..=t {
        for i in 0..n {
            // empty product (s == t) is the identity
            let chain = ((s + 1)..=t).fold(T::one(), |acc, j| acc * d.a_bar.at(j, i));
            h[i] += chain * d.b_bar.at(s, i) * x[s];
        }
    }
    Ok(h)
}

/// `M[j, i] = C_jᵀ Ā_j ⋯ Ā_{i+1} B̄_i` for `j ≥ i`, zero above the diagonal.
pub fn semiseparable_matrix<T: Scalar>(d: &DiscreteSsmParams<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    if c.shape() != d.a_bar.shape() {
        return shape_err("semiseparable_matrix", format!("C {:?} vs {:?}", c.shape(), d.a_bar.shape()));
    }
    let (t_len, n) = (d.seq_len(), d.state_dim());
    let mut m = vec![T::zero(); t_len * t_len];
    let mut chain = vec![T::zero(); n];
    for i in 0..t_len {
        chain.copy_from_slice(d.b_bar.row(i));
        for j in i..t_len {
            if j > i {
                for (k, v) in chain.iter_mut().enumerate() {
                    *v *= d.a_bar.at(j, k);
                }
            }
            m[j * t_len + i] = chain.iter().zip(c.row(j)).map(|(&a, &b)| a * b).sum();
        }
    }
    Tensor::new([t_len, t_len], m)
}

/// `y = M x`.
pub fn matrix_form<T: Scalar>(m: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    if m.ndim() != 2 || m.shape()[0] != m.shape()[1] || m.shape()[1] != x.len() {
        return shape_err("matrix_form", format!("M {:?}, x of length {}", m.shape(), x.len()));
    }
    let xt = Tensor::column(x.to_vec())?;
    Ok(m.matmul(&xt)?.into_data())
}

/// Count of singular values above `rel_tol · σ_max`.
pub fn numerical_rank<T: Scalar>(block: &Tensor<T>, rel_tol: f64) -> Result<usize> {
    if block.ndim() != 2 {
        return shape_err("numerical_rank", format!("expected 2-D, got {:?}", block.shape()));
    }
    let (r, c) = (block.shape()[0], block.shape()[1]);
    if r == 0 || c == 0 {
        return Ok(0);
    }
    let mat = nalgebra::DMatrix::from_row_iterator(r, c, block.data().iter().map(|v| v.as_f64()));
    let sv = mat.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}

/// Input-dependent projection weights of a `d`-channel selective SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveWeights<T: Scalar> {
    /// `[d, d]`: row `e` produces the step size of channel `e`.
    pub w_delta: Tensor<T>,
    /// `[d]`
    pub b_delta: Tensor<T>,
    /// `[N, d]`
    pub w_b: Tensor<T>,
    /// `[N, d]`
    pub w_c: Tensor<T>,
    /// `[d, N]`, all negative.
    pub a: Tensor<T>,
}

impl<T: Scalar> SelectiveWeights<T> {
    /// Random projections, `A = -(1..N)` per channel and a step-size bias
    /// whose softplus is uniform in `[1e-3, 1e-1]`.
    pub fn init(d: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (d as f64).sqrt();
        let mut uni = |shape: [usize; 2]| {
            Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-scale..scale)))
        };
        let w_delta = uni([d, d])?;
        let w_b = uni([n, d])?;
        let w_c = uni([n, d])?;
        let b_delta = Tensor::from_fn([d], |_| T::lit(inverse_softplus(rng.gen_range(1e-3..1e-1))))?;
        let a = Tensor::from_fn([d, n], |i| T::lit(-((i % n) as f64 + 1.0)))?;
        Ok(Self {
            w_delta,
            b_delta,
            w_b,
            w_c,
            a,
        })
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    // log(e^y - 1), stable for small y
    y + (-(-y).exp_m1()).ln()
}

/// Per-channel parameters for input `x: [T, d]`.
///
/// `Δ_{t,e} = softplus(w_Δ[e]·x_t + b_Δ[e])`, `B_t = W_B x_t`, `C_t = W_C x_t`.
pub fn selective_params<T: Scalar>(x: &Tensor<T>, w: &SelectiveWeights<T>) -> Result<Vec<SsmParams<T>>> {
    let d = w.channels();
    if x.ndim() != 2 || x.cols() != d {
        return shape_err("selective_params", format!("x {:?} for {d} channels", x.shape()));
    }
    let delta_pre = x.matmul(&w.w_delta.transpose()?)?;
    let b = x.matmul(&w.w_b.transpose()?)?;
    let c = x.matmul(&w.w_c.transpose()?)?;
    let t_len = x.rows();
    (0..d)
        .map(|e| {
            let delta = (0..t_len)
                .map(|t| softplus(delta_pre.at(t, e) + w.b_delta.data()[e]))
                .collect();
            SsmParams::new(delta, w.a.row(e).to_vec(), b.clone(), c.clone())
        })
        .collect()
}

fn column<T: Scalar>(x: &Tensor<T>, e: usize) -> Vec<T> {
    (0..x.rows()).map(|t| x.at(t, e)).collect()
}

/// Selective scan through the recurrence: `[T, d] -> [T, d]`.
pub fn selective_scan<T: Scalar>(x: &Tensor<T>, w: &SelectiveWeights<T>) -> Result<Tensor<T>> {
    let params = selective_params(x, w)?;
    let mut cols = Vec::with_capacity(params.len());
    for (e, p) in params.iter().enumerate() {
        let d = discretize(p)?;
        cols.push(recurrence(&d, p.c(), &column(x, e))?);
    }
    stack_columns(&cols, x.rows())
}

/// Selective scan through the materialised semi-separable matrix of each channel.
pub fn selective_scan_matrix<T: Scalar>(x: &Tensor<T>, w: &SelectiveWeights<T>) -> Result<Tensor<T>> {
    let params = selective_params(x, w)?;
    let mut cols = Vec::with_capacity(params.len());
    for (e, p) in params.iter().enumerate() {
        let d = discretize(p)?;
        let m = semiseparable_matrix(&d, p.c())?;
        cols.push(matrix_form(&m, &column(x, e))?);
    }
    stack_columns(&cols, x.rows())
}

fn stack_columns<T: Scalar>(cols: &[Vec<T>], rows: usize) -> Result<Tensor<T>> {
    let d = cols.len();
    Tensor::from_fn([rows, d], |i| cols[i % d][i / d])
}

/// Inputs of the fused multi-channel scan used inside the Mamba block.
///
/// `u, delta: [T, E]`, `a: [E, N]`, `b, c: [T, N]`, `d_skip: [E]`.
/// `resets[t]` zeroes the carried state before step `t`.
pub struct ScanInputs<'a, T: Scalar> {
    pub u: &'a Tensor<T>,
    pub delta: &'a Tensor<T>,
    pub a: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub d_skip: &'a Tensor<T>,
    pub resets: Option<&'a [bool]>,
}

impl<T: Scalar> ScanInputs<'_, T> {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (t_len, e) = (self.u.rows(), self.u.cols());
        let n = self.a.cols();
        let ok = self.u.ndim() == 2
            && self.delta.shape() == self.u.shape()
            && self.a.shape() == [e, n]
            && self.b.shape() == [t_len, n]
            && self.c.shape() == [t_len, n]
            && self.d_skip.len() == e
            && self.resets.is_none_or(|r| r.len() == t_len);
        if !ok {
            return shape_err(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                    self.u.shape(),
                    self.delta.shape(),
                    self.a.shape(),
                    self.b.shape(),
                    self.c.shape(),
                    self.d_skip.shape()
                ),
            );
        }
        Ok((t_len, e, n))
    }
}

/// Fused forward of the multi-channel selective scan; keeps only the output.
pub fn scan_forward<T: Scalar>(s: &ScanInputs<'_, T>) -> Result<Tensor<T>> {
    let (t_len, e_dim, n) = s.dims()?;
    let (u, dl, a, b, c, dk) = (
        s.u.data(),
        s.delta.data(),
        s.a.data(),
        s.b.data(),
        s.c.data(),
        s.d_skip.data(),
    );
    let mut h = vec![T::zero(); e_dim * n];
    let mut y = vec![T::zero(); t_len * e_dim];
    for t in 0..t_len {
        if s.resets.is_some_and(|r| r[t]) {
            h.iter_mut().for_each(|v| *v = T::zero());
        }
        let (bt, ct) = (&b[t * n..(t + 1) * n], &c[t * n..(t + 1) * n]);
        for e in 0..e_dim {
            let dt = dl[t * e_dim + e];
            let ut = u[t * e_dim + e];
            let du = dt * ut;
            let he = &mut h[e * n..(e + 1) * n];
            let ae = &a[e * n..(e + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let hv = (dt * ae[k]).exp() * he[k] + du * bt[k];
                he[k] = hv;
                acc += ct[k] * hv;
            }
            y[t * e_dim + e] = acc + dk[e] * ut;
        }
    }
    Tensor::checked(vec![t_len, e_dim], y, "selective_scan")
}

/// Gradients of the fused scan for output gradient `gy: [T, E]`, in the
/// order `(u, delta, a, b, c, d_skip)`.
#[allow(clippy::type_complexity)]
pub fn scan_backward<T: Scalar>(
    s: &ScanInputs<'_, T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (t_len, e_dim, n) = s.dims()?;
    if gy.shape() != s.u.shape() {
        return shape_err("selective_scan backward", format!("{:?}", gy.shape()));
    }
    let (u, dl, a, b, c, dk, g) = (
        s.u.data(),
        s.delta.data(),
        s.a.data(),
        s.b.data(),
        s.c.data(),
        s.d_skip.data(),
        gy.data(),
    );
    let reset = |t: usize| s.resets.is_some_and(|r| r[t]);
    let mut gu = vec![T::zero(); t_len * e_dim];
    let mut gdl = vec![T::zero(); t_len * e_dim];
    let mut ga = vec![T::zero(); e_dim * n];
    let mut gb = vec![T::zero(); t_len * n];
    let mut gc = vec![T::zero(); t_len * n];
    let mut gd = vec![T::zero(); e_dim];
    let mut hs = vec![T::zero(); t_len * n];
    let mut dh = vec![T::zero(); n];
    for e in 0..e_dim {
        let ae = &a[e * n..(e + 1) * n];
        // recompute this channel's states
        let mut h = vec![T::zero(); n];
        for t in 0..t_len {
            if reset(t) {
                h.iter_mut().for_each(|v| *v = T::zero());
            }
            let dt = dl[t * e_dim + e];
            let du = dt * u[t * e_dim + e];
            for k in 0..n {
                h[k] = (dt * ae[k]).exp() * h[k] + du * b[t * n + k];
            }
            hs[t * n..(t + 1) * n].copy_from_slice(&h);
        }
        dh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..t_len).rev() {
            let idx = t * e_dim + e;
            let (gt, dt, ut) = (g[idx], dl[idx], u[idx]);
            gd[e] += gt * ut;
            gu[idx] += gt * dk[e];
            let has_prev = t > 0 && !reset(t);
            let mut gdt = T::zero();
            let mut gut = T::zero();
            for k in 0..n {
                let ht = hs[t * n + k];
                gc[t * n + k] += gt * ht;
                let dhk = dh[k] + gt * c[t * n + k];
                let abar = (dt * ae[k]).exp();
                if has_prev {
                    let hp = hs[(t - 1) * n + k];
                    let g_abar = dhk * hp * abar;
                    gdt += g_abar * ae[k];
                    ga[e * n + k] += g_abar * dt;
                }
                let bk = b[t * n + k];
                gdt += dhk * bk * ut;
                gut += dhk * dt * bk;
                gb[t * n + k] += dhk * dt * ut;
                dh[k] = if has_prev { dhk * abar } else { T::zero() };
            }
            gdl[idx] += gdt;
            gu[idx] += gut;
        }
    }
    Ok((
        Tensor::checked(vec![t_len, e_dim], gu, "selective_scan backward")?,
        Tensor::checked(vec![t_len, e_dim], gdl, "selective_scan backward")?,
        Tensor::checked(vec![e_dim, n], ga, "selective_scan backward")?,
        Tensor::checked(vec![t_len, n], gb, "selective_scan backward")?,
        Tensor::checked(vec![t_len, n], gc, "selective_scan backward")?,
        Tensor::checked(s.d_skip.shape().to_vec(), gd, "selective_scan backward")?,
    ))
}

/// Fused selective scan on the tape.
#[allow(clippy::too_many_arguments)]
pub fn scan_var<T: Scalar>(
    tape: &Tape<T>,
    u: &Var<T>,
    delta: &Var<T>,
    a: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d_skip: &Var<T>,
    resets: Option<Rc<Vec<bool>>>,
) -> Result<Var<T>> {
    let out = scan_forward(&ScanInputs {
        u: u.value(),
        delta: delta.value(),
        a: a.value(),
        b: b.value(),
        c: c.value(),
        d_skip: d_skip.value(),
        resets: resets.as_deref().map(Vec::as_slice),
    })?;
    let saved = [u, delta, a, b, c, d_skip].map(Var::shared);
    Ok(tape.custom(&[u, delta, a, b, c, d_skip], out, move |g, _| {
        let [u, delta, a, b, c, d] = &saved;
        let (gu, gdl, ga, gb, gc, gd) = scan_backward(
            &ScanInputs {
                u,
                delta,
                a,
                b,
                c,
                d_skip: d,
                resets: resets.as_deref().map(Vec::as_slice),
            },
            g,
        )?;
        Ok(vec![Some(gu), Some(gdl), Some(ga), Some(gb), Some(gc), Some(gd)])
    }))
}
