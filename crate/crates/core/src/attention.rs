//! Masked linear attention and bucket-local softmax attention.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lsh::BucketAssignment;
use crate::numeric::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum MaskKind {
    Causal,
    Decay(f64),
    Semiseparable,
}

/// Lower-triangular `T × T` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredMask<T: Scalar> {
    kind: MaskKind,
    l: Tensor<T>,
}

impl<T: Scalar> StructuredMask<T> {
    pub fn causal(t: usize) -> Self {
        let l = Tensor::from_fn([t, t], |i| if i % t.max(1) <= i / t.max(1) { T::one() } else { T::zero() })
            .expect("finite");
        Self {
            kind: MaskKind::Causal,
            l,
        }
    }

    /// `L[t, s] = γ^(t-s)`.
    pub fn decay(t: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("decay must be in (0, 1), got {gamma}")));
        }
        let l = Tensor::from_fn([t, t], |i| {
            let (r, c) = (i / t, i % t);
            if c <= r {
                T::lit(gamma.powi((r - c) as i32))
            } else {
                T::zero()
            }
        })?;
        Ok(Self {
            kind: MaskKind::Decay(gamma),
            l,
        })
    }

    /// `L[t, s] = Ā_t ⋯ Ā_{s+1}` for a scalar state.
    pub fn semiseparable(a_bar: &[T]) -> Result<Self> {
        let t = a_bar.len();
        let mut l = vec![T::zero(); t * t];
        for s in 0..t {
            let mut chain = T::one();
            for r in s..t {
                if r > s {
                    chain *= a_bar[r];
                }
                l[r * t + s] = chain;
            }
        }
        Ok(Self {
            kind: MaskKind::Semiseparable,
            l: Tensor::new([t, t], l)?,
        })
    }

    pub fn kind(&self) -> &MaskKind {
        &self.kind
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.l
    }

    pub fn len(&self) -> usize {
        self.l.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }
}

fn check_qkv<T: Scalar>(op: &'static str, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.cols() != k.cols() || k.rows() != v.rows() {
        return shape_err(op, format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()));
    }
    Ok(())
}

/// `Q (Kᵀ V)`, no softmax.
pub fn linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_qkv("linear_attention", q, k, v)?;
    q.matmul(&k.transpose()?.matmul(v)?)
}

/// `(L ∘ Q Kᵀ) V`, materialised.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &StructuredMask<T>,
) -> Result<Tensor<T>> {
    check_qkv("masked_attention", q, k, v)?;
    let t = mask.len();
    if q.rows() != t || k.rows() != t {
        return shape_err("masked_attention", format!("mask {t}x{t} for Q {:?}, K {:?}", q.shape(), k.shape()));
    }
    q.matmul(&k.transpose()?)?.mul(&mask.l)?.matmul(v)
}

/// Causal linear attention by running state `S_t = S_{t-1} + k_t v_tᵀ`, `y_t = S_tᵀ q_t`.
pub fn causal_linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_qkv("causal_linear_attention", q, k, v)?;
    if q.rows() != k.rows() {
        return shape_err("causal_linear_attention", format!("{} queries, {} keys", q.rows(), k.rows()));
    }
    let (dk, dv) = (k.cols(), v.cols());
    let mut s = vec![T::zero(); dk * dv];
    let mut out = Vec::with_capacity(q.rows() * dv);
    for t in 0..q.rows() {
        for (i, &ki) in k.row(t).iter().enumerate() {
            for (j, &vj) in v.row(t).iter().enumerate() {
                s[i * dv + j] += ki * vj;
            }
        }
        for j in 0..dv {
            out.push((0..dk).map(|i| q.at(t, i) * s[i * dv + j]).sum());
        }
    }
    Tensor::new([q.rows(), dv], out)
}

/// Similarity inside a bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    /// `softmax(q kᵀ / √d)`.
    #[default]
    DotProduct,
    /// `exp(-‖q - k‖²)`; not implemented.
    NegativeDistance,
}

fn check_bucketed<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    a: &BucketAssignment,
    kernel: AttentionKernel,
) -> Result<()> {
    if kernel != AttentionKernel::DotProduct {
        return Err(Error::Unsupported(format!("attention kernel {kernel:?}")));
    }
    check_qkv("bucketed_attention", q, k, v)?;
    let n = q.rows();
    if k.rows() != n || a.n_points() != n || a.m1() == 0 {
        return shape_err(
            "bucketed_attention",
            format!("{n} queries, {} keys, assignment over {} points", k.rows(), a.n_points()),
        );
    }
    Ok(())
}

/// Scaled dot-product softmax within each bucket of each table, averaged over
/// tables, in input order.
pub fn bucketed_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    assignment: &BucketAssignment,
    kernel: AttentionKernel,
) -> Result<Tensor<T>> {
    check_bucketed(q, k, v, assignment, kernel)?;
    let (n, dv) = (q.rows(), v.cols());
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let weight = T::one() / T::lit(assignment.m1() as f64);
    let mut out = vec![T::zero(); n * dv];
    for table in &assignment.tables {
        for bucket in &table.buckets {
            let idx = &table.order[bucket.clone()];
            let p = bucket_probs(q, k, idx, scale)?;
            let o = p.matmul(&v.gather_rows(idx)?)?;
            for (r, &i) in idx.iter().enumerate() {
                for (dst, &src) in out[i * dv..(i + 1) * dv].iter_mut().zip(o.row(r)) {
                    *dst += weight * src;
                }
            }
        }
    }
    Tensor::checked(vec![n, dv], out, "bucketed_attention")
}

fn bucket_probs<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, idx: &[usize], scale: T) -> Result<Tensor<T>> {
    let qb = q.gather_rows(idx)?;
    let kb = k.gather_rows(idx)?;
    qb.matmul(&kb.transpose()?)?.scale(scale)?.softmax(1)
}

/// Gradients of [`bucketed_attention`] for output gradient `g`, as `(dq, dk, dv)`.
pub fn bucketed_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    assignment: &BucketAssignment,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_bucketed(q, k, v, assignment, AttentionKernel::DotProduct)?;
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    if g.shape() != [n, dv] {
        return shape_err("bucketed_attention backward", format!("{:?}", g.shape()));
    }
    let scale = T::one() / T::lit(d as f64).sqrt();
    let weight = T::one() / T::lit(assignment.m1() as f64);
    let (mut gq, mut gk, mut gv) = (vec![T::zero(); n * d], vec![T::zero(); n * d], vec![T::zero(); n * dv]);
    let scatter = |dst: &mut [T], idx: &[usize], src: &Tensor<T>| {
        let c = src.cols();
        for (r, &i) in idx.iter().enumerate() {
            for (a, &b) in dst[i * c..(i + 1) * c].iter_mut().zip(src.row(r)) {
                *a += b;
            }
        }
    };
    for table in &assignment.tables {
        for bucket in &table.buckets {
            let idx = &table.order[bucket.clone()];
            let p = bucket_probs(q, k, idx, scale)?;
            let go = g.gather_rows(idx)?.scale(weight)?;
            let vb = v.gather_rows(idx)?;
            // dV = Pᵀ dO; dP = dO Vᵀ; dS = P ∘ (dP - rowsum(P ∘ dP))
            scatter(&mut gv, idx, &p.transpose()?.matmul(&go)?);
            let dp = go.matmul(&vb.transpose()?)?;
            let b = idx.len();
            let mut ds = vec![T::zero(); b * b];
            for r in 0..b {
                let (pr, dpr) = (p.row(r), dp.row(r));
                let dot: T = pr.iter().zip(dpr).map(|(&x, &y)| x * y).sum();
                for c in 0..b {
                    ds[r * b + c] = pr[c] * (dpr[c] - dot) * scale;
                }
            }
            let ds = Tensor::new([b, b], ds)?;
            scatter(&mut gq, idx, &ds.matmul(&k.gather_rows(idx)?)?);
            scatter(&mut gk, idx, &ds.transpose()?.matmul(&q.gather_rows(idx)?)?);
        }
    }
    Ok((
        Tensor::checked(vec![n, d], gq, "bucketed_attention backward")?,
        Tensor::checked(vec![n, d], gk, "bucketed_attention backward")?,
        Tensor::checked(vec![n, dv], gv, "bucketed_attention backward")?,
    ))
}

/// [`bucketed_attention`] on the tape; the backward pass recomputes the
/// bucket probabilities.
pub fn bucketed_attention_var<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    assignment: Rc<BucketAssignment>,
    kernel: AttentionKernel,
) -> Result<Var<T>> {
    let out = bucketed_attention(q.value(), k.value(), v.value(), &assignment, kernel)?;
    let (qs, ks, vs) = (q.shared(), k.shared(), v.shared());
    Ok(tape.custom(&[q, k, v], out, move |g, _| {
        let (gq, gk, gv) = bucketed_attention_backward(&qs, &ks, &vs, &assignment, g)?;
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsh::{assign_buckets, HashEnsemble, LshConfig, TableOrder};
    use crate::numeric::grad_check;
    use crate::ssm::{discretize, matrix_form, semiseparable_matrix, SsmParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn([r, c], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn linear_attention_cases() {
        let q = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let k = Tensor::new([1, 2], vec![3.0, -1.0]).unwrap();
        let v = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(linear_attention(&q, &k, &v).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(linear_attention(&q, &Tensor::zeros([1, 2]), &v).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(linear_attention(&q, &Tensor::zeros([1, 3]), &v).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_t(&mut rng, 32, 8), rand_t(&mut rng, 32, 8), rand_t(&mut rng, 32, 8));
        let a = linear_attention(&q, &k, &v).unwrap();
        let b = q.matmul(&k.transpose().unwrap()).unwrap().matmul(&v).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn mask_shapes() {
        let c = StructuredMask::<f64>::causal(3);
        assert_eq!(c.matrix().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let d = StructuredMask::<f64>::decay(3, 0.5).unwrap();
        assert_eq!(d.matrix().data(), &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0]);
        assert!(StructuredMask::<f64>::decay(3, 1.0).is_err());
        let s = StructuredMask::semiseparable(&[0.3, 0.5, 0.2]).unwrap();
        assert_eq!(s.matrix().at(2, 0), 0.5 * 0.2);
        assert_eq!(s.matrix().at(0, 2), 0.0);
    }

    #[test]
    fn masked_attention_cases() {
        let q = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let k = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let v = Tensor::new([1, 2], vec![2.0, 4.0]).unwrap();
        let y = masked_attention(&q, &k, &v, &StructuredMask::causal(1)).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_t(&mut rng, 5, 3), rand_t(&mut rng, 5, 3), rand_t(&mut rng, 5, 2));
        let zero = StructuredMask {
            kind: MaskKind::Causal,
            l: Tensor::zeros([5, 5]),
        };
        assert!(masked_attention(&q, &k, &v, &zero).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(masked_attention(&q, &k, &v, &StructuredMask::causal(4)).is_err());
    }

    #[test]
    fn causal_mask_matches_recurrent_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (rand_t(&mut rng, 40, 6), rand_t(&mut rng, 40, 6), rand_t(&mut rng, 40, 4));
        let a = masked_attention(&q, &k, &v, &StructuredMask::causal(40)).unwrap();
        let b = causal_linear_attention(&q, &k, &v).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn semiseparable_mask_reproduces_ssm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, n) = (24, 4);
        // scalar A shared by all state entries makes the mask 1-semiseparable
        let a = -rng.gen_range(0.2..1.0);
        let p = SsmParams::new(
            (0..t).map(|_| rng.gen_range(0.05..0.8)).collect(),
            vec![a; n],
            rand_t(&mut rng, t, n),
            rand_t(&mut rng, t, n),
        )
        .unwrap();
        let d = discretize(&p).unwrap();
        let x: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let abar: Vec<f64> = (0..t).map(|i| d.a_bar.at(i, 0)).collect();
        let mask = StructuredMask::semiseparable(&abar).unwrap();
        let y = masked_attention(p.c(), &d.b_bar, &Tensor::column(x.clone()).unwrap(), &mask).unwrap();
        let expect = matrix_form(&semiseparable_matrix(&d, p.c()).unwrap(), &x).unwrap();
        let diff = y.data().iter().zip(&expect).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn single_bucket_is_full_softmax_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (rand_t(&mut rng, 12, 4), rand_t(&mut rng, 12, 4), rand_t(&mut rng, 12, 3));
        let a = BucketAssignment::single_bucket(12).unwrap();
        let y = bucketed_attention(&q, &k, &v, &a, AttentionKernel::DotProduct).unwrap();
        let full = q.matmul(&k.transpose().unwrap()).unwrap().scale(0.5).unwrap().softmax(1).unwrap().matmul(&v).unwrap();
        assert!(y.max_abs_diff(&full).unwrap() < 1e-14);
    }

    #[test]
    fn singleton_buckets_return_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (rand_t(&mut rng, 7, 4), rand_t(&mut rng, 7, 4), rand_t(&mut rng, 7, 3));
        let a = BucketAssignment {
            block_size: 1,
            tables: vec![
                TableOrder::from_order((0..7).collect(), 1).unwrap(),
                TableOrder::from_order((0..7).rev().collect(), 1).unwrap(),
            ],
        };
        let y = bucketed_attention(&q, &k, &v, &a, AttentionKernel::DotProduct).unwrap();
        assert!(y.max_abs_diff(&v).unwrap() < 1e-15);
        assert!(matches!(
            bucketed_attention(&q, &k, &v, &a, AttentionKernel::NegativeDistance),
            Err(Error::Unsupported(_))
        ));
        let short = BucketAssignment::single_bucket(6).unwrap();
        assert!(bucketed_attention(&q, &k, &v, &short, AttentionKernel::DotProduct).is_err());
    }

    #[test]
    fn separated_clusters_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20;
        let (q, k, mut v) = (rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 3));
        // points 0..10 and 10..20 in separate buckets in both tables
        let order: Vec<usize> = (0..n).collect();
        let swapped: Vec<usize> = (10..n).chain(0..10).collect();
        let a = BucketAssignment {
            block_size: 10,
            tables: vec![TableOrder::from_order(order, 10).unwrap(), TableOrder::from_order(swapped, 10).unwrap()],
        };
        let before = bucketed_attention(&q, &k, &v, &a, AttentionKernel::DotProduct).unwrap();
        let mut k2 = k.clone();
        for i in 10..n {
            for j in 0..4 {
                k2.data_mut()[i * 4 + j] = 1e3 * rng.gen_range(-1.0..1.0);
            }
            v.data_mut()[i * 3] = -777.0;
        }
        let after = bucketed_attention(&q, &k2, &v, &a, AttentionKernel::DotProduct).unwrap();
        for i in 0..10 {
            assert_eq!(before.row(i), after.row(i));
        }
    }

    #[test]
    fn order_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 30;
        let coords = rand_t(&mut rng, n, 2);
        let (q, k, v) = (rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 4));
        // a fine width keeps every AND code distinct, so the index tie-break never fires
        let cfg = LshConfig { coords_only: true, bucket_width: Some(1e-4), ..LshConfig::default() };
        let ens = HashEnsemble::<f64>::new(cfg, 0, 2, 3).unwrap();
        let y = bucketed_attention(&q, &k, &v, &assign_buckets(None, &coords, &ens, 5).unwrap(), AttentionKernel::DotProduct).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(3, 17);
        let g = |t: &Tensor<f64>| t.gather_rows(&perm).unwrap();
        let a2 = assign_buckets(None, &g(&coords), &ens, 5).unwrap();
        let y2 = bucketed_attention(&g(&q), &g(&k), &g(&v), &a2, AttentionKernel::DotProduct).unwrap();
        assert!(y2.max_abs_diff(&g(&y)).unwrap() < 1e-12);
    }

    #[test]
    fn bucketed_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 11;
        let a = Rc::new(BucketAssignment {
            block_size: 4,
            tables: vec![
                TableOrder::from_order((0..n).collect(), 4).unwrap(),
                TableOrder::from_order((0..n).rev().collect(), 4).unwrap(),
            ],
        });
        let probe = rand_t(&mut rng, n, 3);
        let params = vec![rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 3)];
        let report = grad_check(
            |tape, p| {
                let y = bucketed_attention_var(tape, &p[0], &p[1], &p[2], a.clone(), AttentionKernel::DotProduct)?;
                tape.sum(&tape.mul(&y, &tape.constant(probe.clone()))?)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
