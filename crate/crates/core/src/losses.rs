//! Classification losses: softmax cross-entropy, Angular-Softmax
//! (multiplicative angular margin with an annealed blend) and ArcFace
//! (additive angular margin on normalized features and weights).

use std::f64::consts::PI;
use std::fmt;

use crate::tensor::{CustomOp, Graph, Result, Tensor, TensorError, Var};
use crate::Scalar;

/// Clamp applied to cosines before `acos`.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// `λ(it) = max(λ_min, λ_base / (1 + decay·it))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub base: f64,
    pub min: f64,
    pub decay: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            base: 1000.0,
            min: 5.0,
            decay: 0.1,
        }
    }
}

impl LambdaSchedule {
    pub fn at(&self, iteration: u64) -> f64 {
        (self.base / (1.0 + self.decay * iteration as f64)).max(self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    AngularSoftmax { m: u32, lambda: LambdaSchedule },
    ArcFace { s: f64, m: f64 },
}

impl LossKind {
    pub fn angular_softmax_default() -> Self {
        LossKind::AngularSoftmax {
            m: 4,
            lambda: LambdaSchedule::default(),
        }
    }

    pub fn arcface_default() -> Self {
        LossKind::ArcFace { s: 64.0, m: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::CrossEntropy => Ok(()),
            LossKind::AngularSoftmax { m, lambda } => {
                if m < 1 {
                    return Err(TensorError::Invalid("angular_softmax: margin m must be >= 1".into()));
                }
                if !(lambda.min >= 0.0 && lambda.base >= 0.0 && lambda.decay >= 0.0) {
                    return Err(TensorError::Invalid(
                        "angular_softmax: lambda schedule values must be non-negative".into(),
                    ));
                }
                Ok(())
            }
            LossKind::ArcFace { s, m } => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(TensorError::Invalid(format!(
                        "arcface: scale s must be positive, got {s}"
                    )));
                }
                if !(0.0..PI).contains(&m) {
                    return Err(TensorError::Invalid(format!(
                        "arcface: margin m must be in [0, pi), got {m}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Whether the class-score layer is a normalized, bias-free cosine layer.
    pub fn is_normalized(&self) -> bool {
        !matches!(self, LossKind::CrossEntropy)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::AngularSoftmax { .. } => "angular_softmax",
            LossKind::ArcFace { .. } => "arcface",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput<T> {
    /// Scalar batch-mean loss node.
    pub loss: Var,
    pub value: T,
    /// Margin-free class scores used for prediction.
    pub logits: Var,
    pub correct_count: usize,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(TensorError::Invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    match labels.iter().position(|&y| y >= k) {
        Some(row) => Err(TensorError::LabelOutOfRange {
            row,
            label: labels[row],
            classes: k,
        }),
        None => Ok(()),
    }
}

fn matrix_dims<T: Scalar>(g: &Graph<T>, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [n, k] => Ok((n, k)),
        ref s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> CustomOp<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let n = self.labels.len();
        let k = self.probs.len() / n;
        let scale = g[0] / T::from_count(n);
        let mut gx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &y) in self.labels.iter().enumerate() {
            gx[i * k + y] -= scale;
        }
        vec![Some(gx)]
    }
}

/// Records only the mean cross-entropy node; see [`cross_entropy`].
fn cross_entropy_node<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = matrix_dims(g, "cross_entropy", logits)?;
    check_labels(labels, n, k)?;
    let x = g.value(logits).data();
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * k + j] = e;
            z += e;
        }
        probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
        total += max + z.ln() - row[labels[i]];
    }
    let value = Tensor::scalar(total / T::from_count(n));
    g.custom(
        &[logits],
        value,
        Box::new(CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
        }),
    )
}

/// Mean of `-log softmax(logits)[i, label_i]`, via max-shifted log-sum-exp.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<LossOutput<T>> {
    let loss = cross_entropy_node(g, logits, labels)?;
    Ok(LossOutput {
        loss,
        value: g.value(loss).item(),
        logits,
        correct_count: count_correct(g.value(logits), labels),
    })
}

struct NormalizeRowsOp<T> {
    norms: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for NormalizeRowsOp<T> {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let d = out.shape()[1];
        let mut gx = vec![T::zero(); g.len()];
        for (i, &norm) in self.norms.iter().enumerate() {
            let y = &out.data()[i * d..(i + 1) * d];
            let gr = &g[i * d..(i + 1) * d];
            let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..d {
                gx[i * d + j] = (gr[j] - y[j] * dot) / norm;
            }
        }
        vec![Some(gx)]
    }
}

fn row_norms<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<Vec<T>> {
    let d = x.shape()[1];
    x.data()
        .chunks(d)
        .enumerate()
        .map(|(row, r)| {
            let n = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                Ok(n)
            } else {
                Err(TensorError::ZeroNorm { op, row })
            }
        })
        .collect()
}

/// Divides each row of `x[N×d]` by its L2 norm.
pub fn normalize_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (_, d) = matrix_dims(g, "normalize_rows", x)?;
    let t = g.value(x);
    let norms = row_norms(t, "normalize_rows")?;
    let data = t
        .data()
        .chunks(d)
        .zip(&norms)
        .flat_map(|(r, &n)| r.iter().map(move |&v| v / n))
        .collect();
    let out = Tensor::from_vec(t.shape(), data)?;
    g.custom(&[x], out, Box::new(NormalizeRowsOp { norms }))
}

struct RowNormOp;

impl<T: Scalar> CustomOp<T> for RowNormOp {
    fn name(&self) -> &'static str {
        "row_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let d = inputs[0].shape()[1];
        let gx = inputs[0]
            .data()
            .chunks(d)
            .zip(out.data().iter().zip(g))
            .flat_map(|(r, (&n, &gi))| r.iter().map(move |&v| gi * v / n))
            .collect();
        vec![Some(gx)]
    }
}

/// L2 norm of each row of `x[N×d]`, shape `[N]`.
pub fn row_norm<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, _) = matrix_dims(g, "row_norm", x)?;
    let norms = row_norms(g.value(x), "row_norm")?;
    g.custom(&[x], Tensor::from_vec(&[n], norms)?, Box::new(RowNormOp))
}

fn clamp_cos<T: Scalar>(c: T) -> (T, bool) {
    let lim = T::one() - T::lit(COS_CLAMP_EPS);
    if c > lim {
        (lim, true)
    } else if c < -lim {
        (-lim, true)
    } else {
        (c, false)
    }
}

struct ArcMarginOp<T> {
    labels: Vec<usize>,
    s: T,
    m: T,
}

impl<T: Scalar> CustomOp<T> for ArcMarginOp<T> {
    fn name(&self) -> &'static str {
        "arc_margin"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let cos = inputs[0];
        let k = cos.shape()[1];
        let mut gx: Vec<T> = g.iter().map(|&v| v * self.s).collect();
        for (i, &y) in self.labels.iter().enumerate() {
            let idx = i * k + y;
            let (c, clamped) = clamp_cos(cos.data()[idx]);
            gx[idx] = if clamped {
                T::zero()
            } else {
                let theta = c.acos();
                g[idx] * self.s * (theta + self.m).sin() / (T::one() - c * c).sqrt()
            };
        }
        vec![Some(gx)]
    }
}

/// `s·cosθ_j` for non-target classes and `s·cos(θ_y + m)` for the target.
pub fn arc_margin<T: Scalar>(g: &mut Graph<T>, cos: Var, labels: &[usize], s: T, m: T) -> Result<Var> {
    let (n, k) = matrix_dims(g, "arc_margin", cos)?;
    check_labels(labels, n, k)?;
    let c = g.value(cos);
    let mut data: Vec<T> = c.data().iter().map(|&v| v * s).collect();
    for (i, &y) in labels.iter().enumerate() {
        let (cy, _) = clamp_cos(c.data()[i * k + y]);
        data[i * k + y] = s * (cy.acos() + m).cos();
    }
    let out = Tensor::from_vec(&[n, k], data)?;
    g.custom(
        &[cos],
        out,
        Box::new(ArcMarginOp {
            labels: labels.to_vec(),
            s,
            m,
        }),
    )
}

/// `ψ(θ) = (-1)^k cos(mθ) - 2k` for `θ ∈ [kπ/m, (k+1)π/m]`, and `dψ/dθ`.
pub fn psi<T: Scalar>(theta: T, m: u32) -> (T, T) {
    let mt = T::from_count(m as usize);
    let pi = T::lit(PI);
    let k = (theta * mt / pi).floor().max(T::zero()).min(mt - T::one());
    let sign = if k.to_u64().unwrap_or(0) % 2 == 0 {
        T::one()
    } else {
        -T::one()
    };
    let two = T::lit(2.0);
    (sign * (mt * theta).cos() - two * k, -sign * mt * (mt * theta).sin())
}

/// Blended target factor `g(c) = (λc + ψ(acos c)) / (1 + λ)` and `g'(c)`.
///
/// `dψ/dc = (-1)^k m sin(mθ) / sin θ` stays finite at θ ∈ {0, π}; the
/// ratio is replaced by its limit there, so no ε-clamp is needed.
fn sphere_target<T: Scalar>(c: T, m: u32, lambda: T) -> (T, T) {
    let c = c.max(-T::one()).min(T::one());
    let theta = c.acos();
    let (p, dp) = psi(theta, m);
    let sin = theta.sin();
    let dpsi_dc = if sin > T::lit(1e-12) {
        -dp / sin
    } else {
        // lim -ψ'(θ)/sin θ = (-1)^k m² cos(mθ)/cos θ
        let mt = T::from_count(m as usize);
        let k = (theta * mt / T::lit(PI)).floor().max(T::zero()).min(mt - T::one());
        let sign = if k.to_u64().unwrap_or(0) % 2 == 0 {
            T::one()
        } else {
            -T::one()
        };
        sign * mt * mt * (mt * theta).cos() / theta.cos()
    };
    let denom = T::one() + lambda;
    ((lambda * c + p) / denom, (lambda + dpsi_dc) / denom)
}

struct AngularMarginOp<T> {
    labels: Vec<usize>,
    m: u32,
    lambda: T,
}

impl<T: Scalar> CustomOp<T> for AngularMarginOp<T> {
    fn name(&self) -> &'static str {
        "angular_margin"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (raw, norms) = (inputs[0], inputs[1]);
        let k = raw.shape()[1];
        let mut graw = g.to_vec();
        let mut gnorm = vec![T::zero(); norms.numel()];
        for (i, &y) in self.labels.iter().enumerate() {
            let idx = i * k + y;
            let n = norms.data()[i];
            let c = raw.data()[idx] / n;
            let (gv, dg) = sphere_target(c, self.m, self.lambda);
            graw[idx] = g[idx] * dg;
            gnorm[i] = g[idx] * (gv - c * dg);
        }
        vec![Some(graw), Some(gnorm)]
    }
}

/// Target logit `‖f‖·(λ cosθ_y + ψ(θ_y)) / (1 + λ)`; other logits pass through.
/// `raw[N×K]` holds `‖f‖·cosθ_j`, `norms[N]` holds `‖f‖`.
pub fn angular_margin<T: Scalar>(
    g: &mut Graph<T>,
    raw: Var,
    norms: Var,
    labels: &[usize],
    m: u32,
    lambda: T,
) -> Result<Var> {
    let (n, k) = matrix_dims(g, "angular_margin", raw)?;
    check_labels(labels, n, k)?;
    if g.shape(norms) != [n] {
        return Err(TensorError::ShapeMismatch {
            op: "angular_margin",
            lhs: vec![n, k],
            rhs: g.shape(norms).to_vec(),
        });
    }
    let r = g.value(raw);
    let nv = g.value(norms);
    let mut data = r.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        let norm = nv.data()[i];
        data[i * k + y] = norm * sphere_target(data[i * k + y] / norm, m, lambda).0;
    }
    let out = Tensor::from_vec(&[n, k], data)?;
    g.custom(
        &[raw, norms],
        out,
        Box::new(AngularMarginOp {
            labels: labels.to_vec(),
            m,
            lambda,
        }),
    )
}

/// ArcFace over `features[N×d]` and class weights `weight[K×d]`.
pub fn arcface<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    weight: Var,
    labels: &[usize],
    s: f64,
    m: f64,
) -> Result<LossOutput<T>> {
    LossKind::ArcFace { s, m }.validate()?;
    let cos = normalized_cosine(g, features, weight)?;
    let logits = arc_margin(g, cos, labels, T::lit(s), T::lit(m))?;
    let loss = cross_entropy_node(g, logits, labels)?;
    let plain = g.scale(cos, T::lit(s))?;
    Ok(LossOutput {
        loss,
        value: g.value(loss).item(),
        logits: plain,
        correct_count: count_correct(g.value(plain), labels),
    })
}

/// `f̂ · ŵᵀ`: cosine between every feature row and every class weight row.
pub fn normalized_cosine<T: Scalar>(g: &mut Graph<T>, features: Var, weight: Var) -> Result<Var> {
    let f = normalize_rows(g, features)?;
    let w = normalize_rows(g, weight)?;
    let wt = g.transpose(w)?;
    g.matmul(f, wt)
}

/// Angular-Softmax with margin `m` and blend weight `lambda`.
pub fn angular_softmax<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    weight: Var,
    labels: &[usize],
    m: u32,
    lambda: f64,
) -> Result<LossOutput<T>> {
    if m < 1 {
        return Err(TensorError::Invalid("angular_softmax: margin m must be >= 1".into()));
    }
    let raw = sphere_logits(g, features, weight)?;
    let norms = row_norm(g, features)?;
    let logits = angular_margin(g, raw, norms, labels, m, T::lit(lambda))?;
    let loss = cross_entropy_node(g, logits, labels)?;
    Ok(LossOutput {
        loss,
        value: g.value(loss).item(),
        logits: raw,
        correct_count: count_correct(g.value(raw), labels),
    })
}

/// `f · ŵᵀ = ‖f‖·cosθ`, the bias-free normalized-weight class scores.
pub fn sphere_logits<T: Scalar>(g: &mut Graph<T>, features: Var, weight: Var) -> Result<Var> {
    row_norm(g, features)?;
    let w = normalize_rows(g, weight)?;
    let wt = g.transpose(w)?;
    g.matmul(features, wt)
}

/// Dispatches on the loss kind. `bias` is only used by cross-entropy.
pub fn compute_loss<T: Scalar>(
    g: &mut Graph<T>,
    kind: &LossKind,
    features: Var,
    weight: Var,
    bias: Option<Var>,
    labels: &[usize],
    iteration: u64,
) -> Result<LossOutput<T>> {
    match *kind {
        LossKind::CrossEntropy => {
            let logits = g.linear(features, weight, bias)?;
            cross_entropy(g, logits, labels)
        }
        LossKind::AngularSoftmax { m, lambda } => angular_softmax(g, features, weight, labels, m, lambda.at(iteration)),
        LossKind::ArcFace { s, m } => arcface(g, features, weight, labels, s, m),
    }
}

/// Margin-free class scores, as used at prediction time.
pub fn class_scores<T: Scalar>(
    g: &mut Graph<T>,
    kind: &LossKind,
    features: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    match *kind {
        LossKind::CrossEntropy => g.linear(features, weight, bias),
        LossKind::AngularSoftmax { .. } => sphere_logits(g, features, weight),
        LossKind::ArcFace { s, .. } => {
            let cos = normalized_cosine(g, features, weight)?;
            g.scale(cos, T::lit(s))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Fill};
    use proptest::prelude::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::new(
            shape,
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    fn loss_value(f: impl FnOnce(&mut Graph<f64>) -> Result<LossOutput<f64>>) -> f64 {
        let mut g = Graph::<f64>::new();
        f(&mut g).unwrap().value
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn uniform_logits_give_log_k() {
        let v = loss_value(|g| {
            let l = g.constant(Tensor::new(&[3, 10], Fill::Constant(0.3)).unwrap())?;
            cross_entropy(g, l, &[0, 4, 9])
        });
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut g = Graph::<f64>::new();
        let l = g
            .constant(Tensor::from_vec(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let out = cross_entropy(&mut g, l, &[0]).unwrap();
        assert!(out.value >= 0.0 && out.value < 1e-40);
        assert_eq!(out.correct_count, 1);
        // large logits must not overflow
        let l = g
            .constant(Tensor::from_vec(&[1, 2], vec![1000.0, -1000.0]).unwrap())
            .unwrap();
        let out = cross_entropy(&mut g, l, &[1]).unwrap();
        assert!((out.value - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(rand(&[2, 3], 1)).unwrap();
        assert!(matches!(
            cross_entropy(&mut g, l, &[0, 3]),
            Err(TensorError::LabelOutOfRange {
                row: 1,
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let rep = grad_check(
            |g, v| Ok(cross_entropy(g, v[0], &[0, 4, 2, 1])?.loss),
            &[rand(&[4, 5], 3)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn arcface_zero_margin_is_cosine_cross_entropy() {
        let f = rand(&[4, 8], 5);
        let w = rand(&[6, 8], 6);
        let labels = [0, 5, 2, 3];
        let a = loss_value(|g| {
            let fv = g.constant(f.clone())?;
            let wv = g.constant(w.clone())?;
            arcface(g, fv, wv, &labels, 1.0, 0.0)
        });
        let b = loss_value(|g| {
            let fv = g.constant(f.clone())?;
            let wv = g.constant(w.clone())?;
            let cos = normalized_cosine(g, fv, wv)?;
            cross_entropy(g, cos, &labels)
        });
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn arcface_aligned_target_logit() {
        let mut g = Graph::<f64>::new();
        let w = g
            .constant(Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let f = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 0.0]).unwrap()).unwrap();
        let cos = normalized_cosine(&mut g, f, w).unwrap();
        let logits = arc_margin(&mut g, cos, &[0], 64.0, 0.5).unwrap();
        // cos clamps to 1 - 1e-7, so θ ≈ 4.47e-4 rather than 0
        let target = g.value(logits).data()[0];
        // 64·cos(0.5) = 56.16528396098386 (40-digit evaluation)
        assert!((target - 56.16528396098386).abs() < 2e-2, "{target}");
        let exact = 64.0 * ((1.0f64 - 1e-7).acos() + 0.5).cos();
        assert_eq!(target, exact);
    }

    #[test]
    fn arcface_gradcheck_through_arccos() {
        let labels = [1, 0, 5, 3];
        let rep = grad_check(
            |g, v| Ok(arcface(g, v[0], v[1], &labels, 64.0, 0.5)?.loss),
            &[rand(&[4, 8], 7), rand(&[6, 8], 8)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn angular_softmax_m1_is_normalized_weight_cross_entropy() {
        let f = rand(&[3, 8], 9);
        let w = rand(&[5, 8], 10);
        let labels = [4, 0, 2];
        for lambda in [0.0, 5.0, 1000.0] {
            let a = loss_value(|g| {
                let fv = g.constant(f.clone())?;
                let wv = g.constant(w.clone())?;
                angular_softmax(g, fv, wv, &labels, 1, lambda)
            });
            let b = loss_value(|g| {
                let fv = g.constant(f.clone())?;
                let wv = g.constant(w.clone())?;
                let logits = sphere_logits(g, fv, wv)?;
                cross_entropy(g, logits, &labels)
            });
            assert!((a - b).abs() < 1e-10, "lambda {lambda}: {a} vs {b}");
        }
    }

    #[test]
    fn psi_branches() {
        assert_eq!(psi(0.0f64, 4).0, 1.0);
        // continuity at the branch boundary θ = π/4
        let b = PI / 4.0;
        assert!((psi(b - 1e-12, 4).0 - psi(b + 1e-12, 4).0).abs() < 1e-9);
        // ψ is monotonically decreasing on [0, π]
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let v = psi(PI * i as f64 / 200.0, 4).0;
            assert!(v <= prev);
            prev = v;
        }
        assert!((psi(PI, 4).0 - (1.0 - 8.0)).abs() < 1e-12);
        for i in 0..50 {
            let t = 0.01 + 3.0 * i as f64 / 50.0;
            assert_eq!(psi(t, 1).0, t.cos());
        }
    }

    #[test]
    fn angular_softmax_aligned_target_is_norm() {
        let mut g = Graph::<f64>::new();
        let w = g
            .constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let f = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 2.5]).unwrap()).unwrap();
        let raw = sphere_logits(&mut g, f, w).unwrap();
        let n = row_norm(&mut g, f).unwrap();
        let out = angular_margin(&mut g, raw, n, &[1], 4, 5.0).unwrap();
        let t = g.value(out).data()[1];
        assert_eq!(t, 2.5);
    }

    #[test]
    fn angular_softmax_gradcheck() {
        let labels = [2, 4, 0];
        let rep = grad_check(
            |g, v| Ok(angular_softmax(g, v[0], v[1], &labels, 4, 5.0)?.loss),
            &[rand(&[3, 8], 11), rand(&[5, 8], 12)],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn zero_norm_rows_rejected() {
        let mut g = Graph::<f64>::new();
        let f = g
            .constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let w = g.constant(rand(&[3, 2], 1)).unwrap();
        assert!(matches!(
            arcface(&mut g, f, w, &[0, 1], 64.0, 0.5),
            Err(TensorError::ZeroNorm { row: 1, .. })
        ));
        assert!(matches!(
            angular_softmax(&mut g, f, w, &[0, 1], 4, 5.0),
            Err(TensorError::ZeroNorm { row: 1, .. })
        ));
        let f = g.constant(rand(&[2, 2], 2)).unwrap();
        let w = g
            .constant(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            arcface(&mut g, f, w, &[0, 1], 64.0, 0.5),
            Err(TensorError::ZeroNorm { row: 0, .. })
        ));
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(LossKind::ArcFace { s: 0.0, m: 0.5 }.validate().is_err());
        assert!(LossKind::ArcFace { s: 64.0, m: PI }.validate().is_err());
        assert!(LossKind::AngularSoftmax {
            m: 0,
            lambda: LambdaSchedule::default()
        }
        .validate()
        .is_err());
        assert!(LossKind::arcface_default().validate().is_ok());
        assert!(LossKind::angular_softmax_default().validate().is_ok());
    }

    #[test]
    fn lambda_schedule() {
        let s = LambdaSchedule::default();
        assert_eq!(s.at(0), 1000.0);
        assert_eq!(s.at(10), 500.0);
        assert_eq!(s.at(1_000_000), 5.0);
        let mut prev = f64::INFINITY;
        for it in 0..5000 {
            let l = s.at(it);
            assert!(l >= s.min && l <= prev);
            prev = l;
        }
    }

    fn all_losses(f: &Tensor<f64>, w: &Tensor<f64>, labels: &[usize]) -> [f64; 3] {
        let ce = loss_value(|g| {
            let fv = g.constant(f.clone())?;
            let wv = g.constant(w.clone())?;
            let l = g.linear(fv, wv, None)?;
            cross_entropy(g, l, labels)
        });
        let sphere = loss_value(|g| {
            let fv = g.constant(f.clone())?;
            let wv = g.constant(w.clone())?;
            angular_softmax(g, fv, wv, labels, 4, 5.0)
        });
        let arc = loss_value(|g| {
            let fv = g.constant(f.clone())?;
            let wv = g.constant(w.clone())?;
            arcface(g, fv, wv, labels, 64.0, 0.5)
        });
        [ce, sphere, arc]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_nonnegative_and_finite(seed in 0u64..10_000, l0 in 0usize..4, l1 in 0usize..4) {
            let f = rand(&[2, 6], seed);
            let w = rand(&[4, 6], seed + 1);
            for v in all_losses(&f, &w, &[l0, l1]) {
                prop_assert!(v >= 0.0 && v.is_finite());
            }
        }

        #[test]
        fn arcface_feature_scale_invariance(seed in 0u64..10_000, c in 1e-3f64..1e3) {
            let f = rand(&[3, 5], seed);
            let w = rand(&[4, 5], seed + 1);
            let scaled = Tensor::from_vec(&[3, 5], f.data().iter().map(|v| v * c).collect()).unwrap();
            let labels = [0, 3, 1];
            let [.., a] = all_losses(&f, &w, &labels);
            let [.., b] = all_losses(&scaled, &w, &labels);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn class_permutation_invariance(seed in 0u64..10_000, perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle()) {
            let f = rand(&[3, 5], seed);
            let w = rand(&[4, 5], seed + 1);
            let labels = [0usize, 3, 1];
            // row perm[j] of the permuted weight is row j of the original
            let mut pw = vec![0.0; 20];
            for (j, &pj) in perm.iter().enumerate() {
                pw[pj * 5..pj * 5 + 5].copy_from_slice(&w.data()[j * 5..j * 5 + 5]);
            }
            let pw = Tensor::from_vec(&[4, 5], pw).unwrap();
            let plabels: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
            let a = all_losses(&f, &w, &labels);
            let b = all_losses(&f, &pw, &plabels);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
            }
        }
    }
}
