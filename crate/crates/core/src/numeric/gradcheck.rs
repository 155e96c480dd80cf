use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so elements whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Relative error `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Checks every element of every parameter. See [`grad_check_sampled`].
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    grad_check_sampled(f, params, eps, tol, usize::MAX)
}

/// Compares the tape gradient of the scalar `f(params)` with
/// `(f(p + eps) - f(p - eps)) / (2 eps)` on up to `max_per_param` evenly
/// strided elements of each parameter.
pub fn grad_check_sampled<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<T>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|v| grads.get_or_zero(v)).collect();

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<T>> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance: tol,
        passed: true,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for ei in (0..n).step_by(stride) {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + T::lit(eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - T::lit(eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[pi].data()[ei].as_f64(), numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, ei);
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
