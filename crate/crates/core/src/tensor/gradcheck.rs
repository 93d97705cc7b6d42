use super::{Graph, Result, Tensor, TensorError, Var};
use crate::Scalar;

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Central difference `(f(x+eps) - f(x-eps)) / (2 eps)`.
pub fn central_difference<T: Scalar>(f: impl Fn(T) -> T, x: T, eps: T) -> T {
    (f(x + eps) - f(x - eps)) / (eps + eps)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
    /// Maximum relative error per parameter tensor.
    pub per_param: Vec<f64>,
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

fn value_at<T, F>(f: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (g, _, out) = evaluate(f, params)?;
    Ok(g.value(out).item())
}

/// Compares the tape gradient of a scalar function against central
/// differences on every coordinate of every parameter.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= T::zero() {
        return Err(TensorError::BadEps);
    }
    let (mut g, vars, out) = evaluate(&f, params)?;
    let again = value_at(&f, params)?;
    let base = g.value(out).item();
    if base != again {
        return Err(TensorError::NonDeterministic {
            first: base.as_f64(),
            second: again.as_f64(),
        });
    }
    let analytic: Vec<Vec<T>> = match g.backward(out) {
        Ok(()) => vars
            .iter()
            .zip(params)
            .map(|(v, p)| g.grad(*v).map_or_else(|| vec![T::zero(); p.numel()], <[T]>::to_vec))
            .collect(),
        Err(TensorError::NoGradPath) => params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        Err(e) => return Err(e),
    };

    let mut report = GradCheckReport {
        per_param: vec![0.0; params.len()],
        ..GradCheckReport::default()
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let plus = value_at(&f, &work)?;
            work[pi].data[ci] = orig - eps;
            let minus = value_at(&f, &work)?;
            work[pi].data[ci] = orig;
            let numeric = ((plus - minus) / (eps + eps)).as_f64();
            let err = relative_error(a.as_f64(), numeric);
            report.coordinates += 1;
            report.per_param[pi] = report.per_param[pi].max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ci, a.as_f64(), numeric));
            }
        }
    }
    Ok(report)
}
