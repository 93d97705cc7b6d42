//! Parametric sigmoid norm: `F(x) = α / (1 + exp(-β (x - γ)))`, applied
//! elementwise with scalar α, β, γ shared across all feature dimensions.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{self, CustomOp, Graph, Tensor, Var};
use crate::Scalar;

/// Lower bound kept on trainable α and β.
pub const PARAM_FLOOR: f64 = 1e-3;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 20.0;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsnError {
    #[error("psn: {name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("psn: gamma must be finite, got {0}")]
    NonFiniteGamma(f64),
    #[error("unknown psn mode `{0}`")]
    UnknownMode(String),
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnParams<T> {
    alpha: T,
    beta: T,
    gamma: T,
    pub alpha_trainable: bool,
    pub beta_trainable: bool,
    pub gamma_trainable: bool,
}

impl<T: Scalar> PsnParams<T> {
    /// Fixed (non-trainable) parameters.
    pub fn new(alpha: T, beta: T, gamma: T) -> Result<Self, PsnError> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v > T::zero() && v.is_finite()) {
                return Err(PsnError::NonPositive {
                    name,
                    value: v.as_f64(),
                });
            }
        }
        if !gamma.is_finite() {
            return Err(PsnError::NonFiniteGamma(gamma.as_f64()));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            alpha_trainable: false,
            beta_trainable: false,
            gamma_trainable: false,
        })
    }

    pub fn with_trainable(mut self, alpha: bool, beta: bool, gamma: bool) -> Self {
        self.alpha_trainable = alpha;
        self.beta_trainable = beta;
        self.gamma_trainable = gamma;
        self
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn any_trainable(&self) -> bool {
        self.alpha_trainable || self.beta_trainable || self.gamma_trainable
    }

    #[inline]
    pub fn value(&self, x: T) -> T {
        psn_value(x, self.alpha, self.beta, self.gamma)
    }

    #[inline]
    pub fn partials(&self, x: T) -> PsnPartials<T> {
        psn_partials(x, self.alpha, self.beta, self.gamma)
    }
}

/// Keeps α and β at or above [`PARAM_FLOOR`].
#[inline]
pub fn project_positive<T: Scalar>(v: T) -> T {
    v.max(T::lit(PARAM_FLOOR))
}

/// Largest value strictly below `alpha` and smallest positive value; the
/// output of [`psn_value`] is confined to this open-interval image.
#[inline]
fn open_bounds<T: Scalar>(alpha: T) -> (T, T) {
    let tiny = T::min_positive_value() * T::epsilon();
    let below = alpha * (T::one() - T::epsilon() / T::lit(2.0));
    (tiny, below)
}

#[inline]
pub fn psn_value<T: Scalar>(x: T, alpha: T, beta: T, gamma: T) -> T {
    let v = alpha * sigmoid(beta * (x - gamma));
    let (lo, hi) = open_bounds(alpha);
    v.max(lo).min(hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnPartials<T> {
    pub dx: T,
    pub dalpha: T,
    pub dbeta: T,
    pub dgamma: T,
}

/// Analytic partial derivatives of the PSN map at one point.
///
/// With `s = σ(β(x-γ))`: `∂x = αβ s(1-s)`, `∂α = s`, `∂β = α(x-γ) s(1-s)`,
/// `∂γ = -αβ s(1-s)`. `1-s` is evaluated as `σ(-z)` to avoid cancellation.
#[inline]
pub fn psn_partials<T: Scalar>(x: T, alpha: T, beta: T, gamma: T) -> PsnPartials<T> {
    let d = x - gamma;
    let z = beta * d;
    let s = sigmoid(z);
    let slope = s * sigmoid(-z);
    let dx = alpha * beta * slope;
    PsnPartials {
        dx,
        dalpha: s,
        dbeta: alpha * d * slope,
        dgamma: -dx,
    }
}

pub fn psn_forward<T: Scalar>(x: &Tensor<T>, p: &PsnParams<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| p.value(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape as input")
}

struct PsnOp;

impl<T: Scalar> CustomOp<T> for PsnOp {
    fn name(&self) -> &'static str {
        "psn"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b, c) = (inputs[1].item(), inputs[2].item(), inputs[3].item());
        let mut gx = Vec::with_capacity(g.len());
        let (mut ga, mut gb, mut gc) = (T::zero(), T::zero(), T::zero());
        for (&xi, &gi) in inputs[0].data().iter().zip(g) {
            let p = psn_partials(xi, a, b, c);
            gx.push(gi * p.dx);
            ga += gi * p.dalpha;
            gb += gi * p.dbeta;
            gc += gi * p.dgamma;
        }
        vec![Some(gx), Some(vec![ga]), Some(vec![gb]), Some(vec![gc])]
    }
}

/// Records the PSN map on the tape. `alpha`, `beta`, `gamma` are
/// one-element nodes; whether they receive gradients depends on their
/// `requires_grad` flag.
pub fn psn<T: Scalar>(g: &mut Graph<T>, x: Var, alpha: Var, beta: Var, gamma: Var) -> tensor::Result<Var> {
    for v in [alpha, beta, gamma] {
        if g.value(v).numel() != 1 {
            return Err(tensor::TensorError::Rank {
                op: "psn",
                expected: 1,
                shape: g.shape(v).to_vec(),
            });
        }
    }
    let (a, b, c) = (g.value(alpha).item(), g.value(beta).item(), g.value(gamma).item());
    let xs = g.value(x);
    let data = xs.data().iter().map(|&v| psn_value(v, a, b, c)).collect();
    let out = Tensor::from_vec(xs.shape(), data)?;
    g.custom(&[x, alpha, beta, gamma], out, Box::new(PsnOp))
}

/// The seven layer settings of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PsnMode {
    /// No PSN layer; plain backbone + classifier.
    Disabled,
    /// α=1, β=20, γ=1, nothing trained.
    Fixed,
    TrainA,
    TrainB,
    TrainG,
    TrainBG,
    TrainABG,
}

impl PsnMode {
    pub const ALL: [PsnMode; 7] = [
        PsnMode::Disabled,
        PsnMode::Fixed,
        PsnMode::TrainA,
        PsnMode::TrainB,
        PsnMode::TrainG,
        PsnMode::TrainBG,
        PsnMode::TrainABG,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PsnMode::Disabled => "disabled",
            PsnMode::Fixed => "fixed",
            PsnMode::TrainA => "train_a",
            PsnMode::TrainB => "train_b",
            PsnMode::TrainG => "train_g",
            PsnMode::TrainBG => "train_bg",
            PsnMode::TrainABG => "train_abg",
        }
    }

    /// `(alpha, beta, gamma)` trainability.
    pub fn trainable(self) -> (bool, bool, bool) {
        match self {
            PsnMode::Disabled | PsnMode::Fixed => (false, false, false),
            PsnMode::TrainA => (true, false, false),
            PsnMode::TrainB => (false, true, false),
            PsnMode::TrainG => (false, false, true),
            PsnMode::TrainBG => (false, true, true),
            PsnMode::TrainABG => (true, true, true),
        }
    }

    /// Initial parameters for the mode; `None` for [`PsnMode::Disabled`].
    /// Every enabled mode starts from α=1, β=20, γ=1.
    pub fn params<T: Scalar>(self) -> Option<PsnParams<T>> {
        if self == PsnMode::Disabled {
            return None;
        }
        let (a, b, g) = self.trainable();
        let p = PsnParams::new(T::lit(DEFAULT_ALPHA), T::lit(DEFAULT_BETA), T::lit(DEFAULT_GAMMA))
            .expect("defaults are valid")
            .with_trainable(a, b, g);
        Some(p)
    }
}

impl fmt::Display for PsnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PsnMode {
    type Err = PsnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PsnMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PsnError::UnknownMode(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{central_difference, grad_check, relative_error, Fill};
    use proptest::prelude::*;

    fn p(a: f64, b: f64, g: f64) -> PsnParams<f64> {
        PsnParams::new(a, b, g).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(1e6f64), 1.0);
        let v = sigmoid(-1000.0f64);
        assert_eq!(v, 0.0);
        assert!(!v.is_nan());
        // 1/(1+e^-1) evaluated with 40-digit arithmetic: 0.7310585786300048792511592418218362743651
        assert_eq!(sigmoid(1.0f64), 0.7310585786300049);
    }

    #[test]
    fn midpoint_and_fixed_row_values() {
        assert_eq!(p(1.0, 20.0, 1.0).value(1.0), 0.5);
        assert_eq!(p(3.0, 0.7, -2.0).value(-2.0), 1.5);
        // 1/(1+e^20) = 2.061153618190204e-9 (high-precision evaluation)
        let v = p(1.0, 20.0, 1.0).value(0.0);
        assert!(relative_error(v, 2.0611536181902037e-9) < 1e-15, "{v:e}");
    }

    #[test]
    fn partials_at_midpoint() {
        let d = p(1.0, 20.0, 1.0).partials(1.0);
        assert_eq!(d.dx, 5.0);
        assert_eq!(d.dbeta, 0.0);
        assert_eq!(d.dgamma, -5.0);
        assert_eq!(d.dalpha, 0.5);
    }

    #[test]
    fn partials_match_finite_differences() {
        let (a, b, g, x) = (1.0, 20.0, 1.0, 1.1);
        let d = psn_partials(x, a, b, g);
        let eps = 1e-6;
        let checks = [
            (d.dx, central_difference(|t| psn_value(t, a, b, g), x, eps)),
            (d.dalpha, central_difference(|t| psn_value(x, t, b, g), a, eps)),
            (d.dbeta, central_difference(|t| psn_value(x, a, t, g), b, eps)),
            (d.dgamma, central_difference(|t| psn_value(x, a, b, t), g, eps)),
        ];
        for (analytic, numeric) in checks {
            assert!(relative_error(analytic, numeric) < 1e-6, "{analytic} vs {numeric}");
        }
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(PsnParams::new(0.0, 1.0, 0.0).is_err());
        assert!(PsnParams::new(1.0, -1.0, 0.0).is_err());
        assert!(PsnParams::new(1.0, 1.0, f64::NAN).is_err());
        assert_eq!(project_positive(-3.0), 1e-3);
        assert_eq!(project_positive(2.0), 2.0);
    }

    #[test]
    fn modes_map_to_table_settings() {
        let fixed = PsnMode::Fixed.params::<f64>().unwrap();
        assert_eq!((fixed.alpha(), fixed.beta(), fixed.gamma()), (1.0, 20.0, 1.0));
        assert!(!fixed.any_trainable());
        let bg = PsnMode::TrainBG.params::<f64>().unwrap();
        assert!(!bg.alpha_trainable && bg.beta_trainable && bg.gamma_trainable);
        assert_eq!((bg.alpha(), bg.beta(), bg.gamma()), (1.0, 20.0, 1.0));
        assert!(PsnMode::Disabled.params::<f64>().is_none());
        for m in PsnMode::ALL {
            assert_eq!(m.as_str().parse::<PsnMode>().unwrap(), m);
        }
        assert!("pns".parse::<PsnMode>().is_err());
    }

    #[test]
    fn saturates_strictly_inside_bounds() {
        for alpha in [0.5, 1.0, 3.0] {
            let q = p(alpha, 20.0, 1.0);
            for x in [-1e6, 1e6, -35.0 / 20.0, 35.0 / 20.0, 0.0] {
                let v = q.value(x);
                assert!(v > 0.0 && v < alpha, "alpha {alpha} x {x} -> {v}");
            }
        }
    }

    #[test]
    fn graph_backward_equals_partials() {
        let q = p(1.3, 4.0, 0.2);
        let x = Tensor::new(
            &[3, 4],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 9,
            },
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone()).unwrap();
        let a = g.param(Tensor::scalar(q.alpha())).unwrap();
        let b = g.param(Tensor::scalar(q.beta())).unwrap();
        let c = g.param(Tensor::scalar(q.gamma())).unwrap();
        let y = psn(&mut g, xv, a, b, c).unwrap();
        assert_eq!(g.value(y).data(), psn_forward(&x, &q).data());
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let mut sums = [0.0; 3];
        for (i, &xi) in x.data().iter().enumerate() {
            let d = q.partials(xi);
            assert_eq!(g.grad(xv).unwrap()[i], d.dx);
            sums[0] += d.dalpha;
            sums[1] += d.dbeta;
            sums[2] += d.dgamma;
        }
        assert_eq!(g.grad(a).unwrap()[0], sums[0]);
        assert_eq!(g.grad(b).unwrap()[0], sums[1]);
        assert_eq!(g.grad(c).unwrap()[0], sums[2]);
    }

    #[test]
    fn graph_gradcheck() {
        let x = Tensor::new(
            &[2, 5],
            Fill::Uniform {
                lo: 0.8,
                hi: 1.2,
                seed: 10,
            },
        )
        .unwrap();
        let rep = grad_check(
            |g, v| {
                let y = psn(g, v[0], v[1], v[2], v[3])?;
                g.sum(y)
            },
            &[x, Tensor::scalar(1.0), Tensor::scalar(20.0), Tensor::scalar(1.0)],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2], vec![0.9, 1.3]).unwrap()).unwrap();
        let a = g.constant(Tensor::scalar(1.0)).unwrap();
        let b = g.param(Tensor::scalar(20.0)).unwrap();
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        let y = psn(&mut g, x, a, b, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none() && g.grad(c).is_none());
        assert!(g.grad(b).unwrap()[0] != 0.0);
    }

    proptest! {
        #[test]
        fn bounded_for_all_finite_inputs(x in -1e6f64..1e6, alpha in prop::sample::select(vec![0.5, 1.0, 3.0]),
                                         beta in 1e-3f64..50.0, gamma in -5.0f64..5.0) {
            let v = psn_value(x, alpha, beta, gamma);
            prop_assert!(v > 0.0 && v < alpha);
        }

        #[test]
        fn monotone_increasing(off in -1.0f64..1.0, da in 1e-3f64..0.5, beta in 0.1f64..20.0, gamma in -1.0f64..1.0) {
            // |β(x-γ)| ≤ 30 keeps neighbouring outputs distinguishable in f64
            let q = p(1.0, beta, gamma);
            let a = gamma + off;
            prop_assert!(q.value(a) < q.value(a + da));
        }

        #[test]
        fn slope_decreases_away_from_gamma(d1 in 0.0f64..1.0, extra in 0.01f64..1.0, gamma in -2.0f64..2.0,
                                           side1 in any::<bool>(), side2 in any::<bool>()) {
            let q = p(1.0, 20.0, gamma);
            let d2 = d1 + extra;
            let x1 = if side1 { gamma + d1 } else { gamma - d1 };
            let x2 = if side2 { gamma + d2 } else { gamma - d2 };
            prop_assert!(q.partials(x1).dx > q.partials(x2).dx);
        }

        #[test]
        fn unit_params_reduce_to_sigmoid(x in -700.0f64..700.0) {
            let a = psn_value(x, 1.0, 1.0, 0.0);
            let b = sigmoid(x);
            prop_assert!((a - b).abs() <= f64::EPSILON * b.max(f64::MIN_POSITIVE));
        }
    }
}
