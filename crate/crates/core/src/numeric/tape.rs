//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! A [`Tape`] either records (training, gradient checks) or does not
//! (inference). When it does not record, no backward closures are kept and
//! intermediate values are freed as soon as the caller drops their [`Var`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
}

/// A value on the tape. Cloning is cheap (shared storage).
pub struct Var<T: Scalar> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            value: Rc::clone(&self.value),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn shared(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

pub struct Tape<T: Scalar> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every tracked variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the output.
    pub fn get_or_zero(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that evaluates without recording anything.
    pub fn inference() -> Self {
        Self {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        let id = self.push_leaf(value.shape().to_vec());
        Var {
            id,
            value: Rc::new(value),
        }
    }

    fn push_leaf(&self, shape: Vec<usize>) -> Option<usize> {
        if !self.recording {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            shape,
        });
        Some(nodes.len() - 1)
    }

    /// Records an operation with a hand-written backward rule.
    ///
    /// `backward` receives the output gradient and a mask of which inputs need
    /// a gradient, and returns one entry per input (shapes must match).
    pub fn custom<F>(&self, inputs: &[&Var<T>], output: Tensor<T>, backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let id = if self.recording && ids.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: ids,
                backward: Some(Box::new(backward)),
                shape: output.shape().to_vec(),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            id,
            value: Rc::new(output),
        }
    }

    /// Reverse sweep from a one-element output. Does not consume the tape, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, output: &Var<T>) -> Result<Gradients<T>> {
        if output.value.len() != 1 {
            return shape_err(
                "backward",
                format!("output must have one element, got {:?}", output.shape()),
            );
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = output.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(nodes[root].shape.clone(), T::one())?);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                let input_grads = bw(&g, &needs)?;
                for (slot, ig) in node.inputs.iter().zip(input_grads) {
                    let (Some(src), Some(ig)) = (slot, ig) else { continue };
                    if ig.shape() != nodes[*src].shape.as_slice() {
                        return shape_err(
                            "backward",
                            format!(
                                "gradient shape {:?} for input of shape {:?}",
                                ig.shape(),
                                nodes[*src].shape
                            ),
                        );
                    }
                    grads[*src] = Some(match grads[*src].take() {
                        Some(acc) => acc.add(&ig)?,
                        None => ig,
                    });
                }
            }
            if node.backward.is_none() {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(
        &self,
        a: &Var<T>,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        let out = a.value.map(f).map_err(|_| Error::NonFinite { op })?;
        let x = a.shared();
        let y2 = Rc::new(if self.recording {
            out.clone()
        } else {
            Tensor::zeros([0])
        });
        Ok(self.custom(&[a], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y2.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            Ok(vec![Some(Tensor::checked(g.shape().to_vec(), data, op)?)])
        }))
    }

    pub fn exp(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(a, "exp", T::exp, |_, y| y)
    }

    pub fn log(&self, a: &Var<T>) -> Result<Var<T>> {
        if a.value.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        self.unary(a, "log", T::ln, |x, _| x.recip())
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(a, "sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(a, "softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(
            a,
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `a^p` for non-negative `a`.
    pub fn powf(&self, a: &Var<T>, p: T) -> Result<Var<T>> {
        if a.value.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain("powf of a negative value".into()));
        }
        self.unary(
            a,
            "powf",
            move |x| x.powf(p),
            move |x, _| {
                if p == T::zero() {
                    T::zero()
                } else if x == T::zero() {
                    if p > T::one() {
                        T::zero()
                    } else if p == T::one() {
                        T::one()
                    } else {
                        T::infinity()
                    }
                } else {
                    p * x.powf(p - T::one())
                }
            },
        )
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        self.unary(a, "scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        self.unary(a, "add_scalar", move |x| x + c, |_, _| T::one())
    }

    fn same_shape(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("add", a, b)?;
        let out = a.value.add(&b.value)?;
        Ok(self.custom(&[a, b], out, |g, needs| {
            Ok(vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ])
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("sub", a, b)?;
        let out = a.value.sub(&b.value)?;
        Ok(self.custom(&[a, b], out, |g, needs| {
            Ok(vec![
                needs[0].then(|| g.clone()),
                if needs[1] { Some(g.scale(-T::one())?) } else { None },
            ])
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("mul", a, b)?;
        let out = a.value.mul(&b.value)?;
        let (x, y) = (a.shared(), b.shared());
        Ok(self.custom(&[a, b], out, move |g, needs| {
            Ok(vec![
                if needs[0] { Some(g.mul(&y)?) } else { None },
                if needs[1] { Some(g.mul(&x)?) } else { None },
            ])
        }))
    }

    /// `a[i, j] + bias[j]`.
    pub fn add_row(&self, a: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let c = a.cols();
        if bias.value.len() != c {
            return shape_err("add_row", format!("{:?} + {:?}", a.shape(), bias.shape()));
        }
        let b = bias.value.data();
        let data = a
            .value
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::checked(a.shape().to_vec(), data, "add_row")?;
        let bshape = bias.shape().to_vec();
        Ok(self.custom(&[a, bias], out, move |g, needs| {
            let gb = if needs[1] {
                Some(Tensor::checked(bshape.clone(), col_sums(g), "add_row")?)
            } else {
                None
            };
            Ok(vec![needs[0].then(|| g.clone()), gb])
        }))
    }

    /// `a[i, j] * gain[j]`.
    pub fn mul_row(&self, a: &Var<T>, gain: &Var<T>) -> Result<Var<T>> {
        let c = a.cols();
        if gain.value.len() != c {
            return shape_err("mul_row", format!("{:?} * {:?}", a.shape(), gain.shape()));
        }
        let w = gain.value.data();
        let data = a
            .value
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(w).map(|(&x, &y)| x * y))
            .collect();
        let out = Tensor::checked(a.shape().to_vec(), data, "mul_row")?;
        let (x, w) = (a.shared(), gain.shared());
        let wshape = gain.shape().to_vec();
        Ok(self.custom(&[a, gain], out, move |g, needs| {
            let ga = if needs[0] {
                let wd = w.data();
                let data = g
                    .data()
                    .chunks(c.max(1))
                    .flat_map(|row| row.iter().zip(wd).map(|(&x, &y)| x * y))
                    .collect();
                Some(Tensor::checked(g.shape().to_vec(), data, "mul_row")?)
            } else {
                None
            };
            let gw = if needs[1] {
                let prod = g.mul(&x)?;
                Some(Tensor::checked(wshape.clone(), col_sums(&prod), "mul_row")?)
            } else {
                None
            };
            Ok(vec![ga, gw])
        }))
    }

    /// `a[i, j] * column[i]` with `column` held constant.
    pub fn mul_col_const(&self, a: &Var<T>, column: &[T]) -> Result<Var<T>> {
        let c = a.cols();
        if column.len() != a.rows() {
            return shape_err("mul_col_const", format!("{} rows vs {}", a.rows(), column.len()));
        }
        let col: Rc<Vec<T>> = Rc::new(column.to_vec());
        let apply = move |t: &Tensor<T>, col: &[T]| -> Vec<T> {
            t.data()
                .chunks(c.max(1))
                .zip(col)
                .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                .collect()
        };
        let out = Tensor::checked(a.shape().to_vec(), apply(&a.value, &col), "mul_col_const")?;
        Ok(self.custom(&[a], out, move |g, _| {
            Ok(vec![Some(Tensor::checked(
                g.shape().to_vec(),
                apply(g, &col),
                "mul_col_const",
            )?)])
        }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(a.value.sum())?;
        let shape = a.shape().to_vec();
        Ok(self.custom(&[a], out, move |g, _| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.data()[0])?)])
        }))
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        let n = a.value.len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(&s, T::lit(1.0 / n as f64))
    }

    /// `Σ a[i] * w[i]` with constant weights.
    pub fn weighted_sum(&self, a: &Var<T>, weights: &[T]) -> Result<Var<T>> {
        if weights.len() != a.value.len() {
            return shape_err(
                "weighted_sum",
                format!("{} values vs {} weights", a.value.len(), weights.len()),
            );
        }
        let total = a.value.data().iter().zip(weights).map(|(&x, &w)| x * w).sum();
        let out = Tensor::scalar(total)?;
        let w = Rc::new(weights.to_vec());
        let shape = a.shape().to_vec();
        Ok(self.custom(&[a], out, move |g, _| {
            let s = g.data()[0];
            Ok(vec![Some(Tensor::checked(
                shape.clone(),
                w.iter().map(|&w| w * s).collect(),
                "weighted_sum",
            )?)])
        }))
    }

    /// Per-row sum of a 2-D tensor, giving `rows × 1`.
    pub fn row_sums(&self, a: &Var<T>) -> Result<Var<T>> {
        let (r, c) = (a.rows(), a.cols());
        let data = (0..r).map(|i| a.value.row(i).iter().copied().sum()).collect();
        let out = Tensor::checked(vec![r, 1], data, "row_sums")?;
        let shape = a.shape().to_vec();
        Ok(self.custom(&[a], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, c))
                .collect();
            Ok(vec![Some(Tensor::checked(shape.clone(), data, "row_sums")?)])
        }))
    }

    /// Log-sum-exp of `values[group]` for each group, giving `groups × 1`.
    pub fn group_logsumexp(&self, values: &Var<T>, groups: Vec<Vec<usize>>) -> Result<Var<T>> {
        let v = values.value.data();
        let mut out = Vec::with_capacity(groups.len());
        for grp in &groups {
            if grp.is_empty() {
                return Err(Error::InvalidArgument("empty log-sum-exp group".into()));
            }
            if let Some(&bad) = grp.iter().find(|&&i| i >= v.len()) {
                return shape_err("group_logsumexp", format!("index {bad} out of {}", v.len()));
            }
            out.push(logsumexp(grp.iter().map(|&i| v[i])));
        }
        let out_t = Tensor::checked(vec![groups.len(), 1], out.clone(), "group_logsumexp")?;
        let x = values.shared();
        Ok(self.custom(&[values], out_t, move |g, _| {
            let mut gx = vec![T::zero(); x.len()];
            for ((grp, &lse), &gg) in groups.iter().zip(&out).zip(g.data()) {
                for &i in grp {
                    gx[i] += gg * (x.data()[i] - lse).exp();
                }
            }
            Ok(vec![Some(Tensor::checked(x.shape().to_vec(), gx, "group_logsumexp")?)])
        }))
    }

    // ---- linear algebra and layout ----------------------------------------

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.value.ndim() != 2 || b.value.ndim() != 2 {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let out = a.value.matmul(&b.value)?;
        let (x, y) = (a.shared(), b.shared());
        Ok(self.custom(&[a, b], out, move |g, needs| {
            let ga = if needs[0] { Some(g.matmul(&y.transpose()?)?) } else { None };
            let gb = if needs[1] { Some(x.transpose()?.matmul(g)?) } else { None };
            Ok(vec![ga, gb])
        }))
    }

    pub fn transpose(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = a.value.transpose()?;
        Ok(self.custom(&[a], out, |g, _| Ok(vec![Some(g.transpose()?)])))
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value.reshape(shape.to_vec())?;
        let orig = a.shape().to_vec();
        Ok(self.custom(&[a], out, move |g, _| Ok(vec![Some(g.reshape(orig.clone())?)])))
    }

    /// Flattens to a single column.
    pub fn reshape_col(&self, a: &Var<T>) -> Result<Var<T>> {
        self.reshape(a, &[a.value.len(), 1])
    }

    /// Output row `i` is input row `idx[i]`. Rows may repeat or be omitted.
    pub fn gather_rows(&self, a: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        let out = a.value.gather_rows(idx)?;
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        let (r, c) = (a.rows(), a.cols());
        let shape = a.shape().to_vec();
        Ok(self.custom(&[a], out, move |g, _| {
            let mut gx = vec![T::zero(); r * c];
            for (o, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[i * c + j] += g.data()[o * c + j];
                }
            }
            Ok(vec![Some(Tensor::checked(shape.clone(), gx, "gather_rows")?)])
        }))
    }

    pub fn concat_cols(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.rows() != b.rows() || a.value.ndim() != 2 || b.value.ndim() != 2 {
            return shape_err("concat_cols", format!("{:?} | {:?}", a.shape(), b.shape()));
        }
        let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(a.value.row(i));
            data.extend_from_slice(b.value.row(i));
        }
        let out = Tensor::checked(vec![r, ca + cb], data, "concat_cols")?;
        Ok(self.custom(&[a, b], out, move |g, needs| {
            let split = |lo: usize, w: usize| -> Result<Tensor<T>> {
                let data = (0..r)
                    .flat_map(|i| g.row(i)[lo..lo + w].to_vec())
                    .collect();
                Tensor::checked(vec![r, w], data, "concat_cols")
            };
            Ok(vec![
                if needs[0] { Some(split(0, ca)?) } else { None },
                if needs[1] { Some(split(ca, cb)?) } else { None },
            ])
        }))
    }

    /// Columns `lo..hi` of a 2-D tensor.
    pub fn slice_cols(&self, a: &Var<T>, lo: usize, hi: usize) -> Result<Var<T>> {
        let (r, c) = (a.rows(), a.cols());
        if lo > hi || hi > c || a.value.ndim() != 2 {
            return shape_err("slice_cols", format!("{lo}..{hi} of {:?}", a.shape()));
        }
        let data = (0..r).flat_map(|i| a.value.row(i)[lo..hi].to_vec()).collect();
        let out = Tensor::checked(vec![r, hi - lo], data, "slice_cols")?;
        Ok(self.custom(&[a], out, move |g, _| {
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                gx[i * c + lo..i * c + hi].copy_from_slice(g.row(i));
            }
            Ok(vec![Some(Tensor::checked(vec![r, c], gx, "slice_cols")?)])
        }))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: &Var<T>, eps: T) -> Result<Var<T>> {
        let (r, c) = (a.rows(), a.cols());
        if c == 0 {
            return shape_err("layer_norm", "zero-width rows");
        }
        let cf = T::lit(c as f64);
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        for i in 0..r {
            let row = a.value.row(i);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cf;
            let s = (var + eps).sqrt().recip();
            inv_std[i] = s;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * s;
            }
        }
        let out_t = Tensor::checked(a.shape().to_vec(), out.clone(), "layer_norm")?;
        let shape = a.shape().to_vec();
        Ok(self.custom(&[a], out_t, move |g, _| {
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                let gy = g.row(i);
                let y = &out[i * c..(i + 1) * c];
                let mg = gy.iter().copied().sum::<T>() / cf;
                let mgy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / cf;
                for j in 0..c {
                    gx[i * c + j] = inv_std[i] * (gy[j] - mg - y[j] * mgy);
                }
            }
            Ok(vec![Some(Tensor::checked(shape.clone(), gx, "layer_norm")?)])
        }))
    }

    /// Depthwise causal convolution: `x: T×C`, `w: C×K`, `bias: C`.
    ///
    /// `y[t, c] = bias[c] + Σ_j w[c, j] · x[t - (K-1) + j, c]`, zero left padding.
    pub fn causal_conv1d(&self, x: &Var<T>, w: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (t_len, ch) = (x.rows(), x.cols());
        if w.value.ndim() != 2 || w.value.rows() != ch || bias.value.len() != ch {
            return shape_err(
                "causal_conv1d",
                format!("x {:?}, w {:?}, bias {:?}", x.shape(), w.shape(), bias.shape()),
            );
        }
        let k = w.cols();
        let xd = x.value.data();
        let wd = w.value.data();
        let bd = bias.value.data();
        let mut out = vec![T::zero(); t_len * ch];
        for t in 0..t_len {
            for c in 0..ch {
                let mut acc = bd[c];
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        acc += wd[c * k + j] * xd[src as usize * ch + c];
                    }
                }
                out[t * ch + c] = acc;
            }
        }
        let out = Tensor::checked(vec![t_len, ch], out, "causal_conv1d")?;
        let (xs, ws) = (x.shared(), w.shared());
        let bshape = bias.shape().to_vec();
        Ok(self.custom(&[x, w, bias], out, move |g, needs| {
            let gd = g.data();
            let xd = xs.data();
            let wd = ws.data();
            let mut gx = vec![T::zero(); t_len * ch];
            let mut gw = vec![T::zero(); ch * k];
            let mut gb = vec![T::zero(); ch];
            for t in 0..t_len {
                for c in 0..ch {
                    let gy = gd[t * ch + c];
                    gb[c] += gy;
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src >= 0 {
                            let s = src as usize * ch + c;
                            gx[s] += gy * wd[c * k + j];
                            gw[c * k + j] += gy * xd[s];
                        }
                    }
                }
            }
            Ok(vec![
                if needs[0] { Some(Tensor::checked(vec![t_len, ch], gx, "causal_conv1d")?) } else { None },
                if needs[1] { Some(Tensor::checked(vec![ch, k], gw, "causal_conv1d")?) } else { None },
                if needs[2] { Some(Tensor::checked(bshape.clone(), gb, "causal_conv1d")?) } else { None },
            ])
        }))
    }
}

fn col_sums<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks(c.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(&p, &p).unwrap();
        let f = tape.sum(&sq).unwrap();
        let g = tape.backward(&f).unwrap();
        assert_eq!(g.get(&p).unwrap().data(), &[2.0, 4.0]);
        // second evaluation is identical
        let g2 = tape.backward(&f).unwrap();
        assert_eq!(g.get(&p), g2.get(&p));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let f = tape.sum(&tape.exp(&p).unwrap()).unwrap();
        assert!(tape.is_empty());
        assert!(!f.tracked());
        assert!(tape.backward(&f).unwrap().get(&p).is_none());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_t(&mut rng, &[5, 4]);
        let b = rand_t(&mut rng, &[4, 3]);
        let row = rand_t(&mut rng, &[4]);
        let w = rand_t(&mut rng, &[4, 3]);
        let cb = rand_t(&mut rng, &[4]);
        let probe = rand_t(&mut rng, &[5, 3]);
        let probe4 = rand_t(&mut rng, &[5, 4]);
        let report = grad_check(
            |tape, p| {
                let (a, b, row, w, cb) = (&p[0], &p[1], &p[2], &p[3], &p[4]);
                let ab = tape.matmul(a, b)?;
                let h = tape.silu(&tape.add_row(a, row)?)?;
                let h = tape.mul_row(&h, row)?;
                let h = tape.layer_norm(&h, 1e-5)?;
                let conv = tape.causal_conv1d(&h, w, cb)?;
                let mixed = tape.concat_cols(&conv, &tape.softplus(&h)?)?;
                let part = tape.slice_cols(&mixed, 1, 4)?;
                let part = tape.gather_rows(&part, &[4, 0, 0, 2, 3])?;
                let s = tape.sigmoid(&tape.add(&part, &ab)?)?;
                let s = tape.powf(&s, 2.0)?;
                let t = tape.transpose(&tape.transpose(&s)?)?;
                let pc = tape.constant(probe.clone());
                let out1 = tape.sum(&tape.mul(&t, &pc)?)?;
                let lse = tape.group_logsumexp(
                    &tape.reshape_col(&tape.row_sums(&h)?)?,
                    vec![vec![0, 1, 2], vec![3, 4], vec![2]],
                )?;
                let out2 = tape.weighted_sum(&lse, &[0.3, -0.7, 1.1])?;
                let l = tape.log(&tape.add_scalar(&tape.exp(&tape.scale(&h, 0.5)?)?, 1.0)?)?;
                let p4 = tape.constant(probe4.clone());
                let out3 = tape.mean(&tape.sub(&tape.mul(&l, &p4)?, &h)?)?;
                let total = tape.add(&tape.add(&out1, &out2)?, &out3)?;
                Ok(total)
            },
            &[a, b, row, w, cb],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros([2, 3]));
        let b = tape.param(Tensor::zeros([3, 2]));
        assert!(tape.add(&a, &b).is_err());
        assert!(tape.matmul(&a, &a).is_err());
        assert!(tape.backward(&a).is_err());
        assert!(tape.log(&a).is_err());
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        let l = logsumexp([1000.0f64, 1000.0].into_iter());
        assert!((l - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
