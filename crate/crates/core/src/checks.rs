//! Gradient-check suites run by `psnet gradcheck` and the acceptance tests.

use std::fmt;

use crate::losses::{angular_softmax, arcface, cross_entropy, LossKind};
use crate::models::{build_model, BackboneConfig, BackboneKind, ModelConfig, ModelError, PsnetModel};
use crate::psn::{psn_partials, psn_value, PsnMode};
use crate::tensor::{central_difference, grad_check, relative_error, CustomOp, Fill, Graph, Tensor, TensorError, Var};

pub const PSN_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Parameter sets `(α, β, γ)` of the PSN partials grid.
pub const PSN_GRID_PARAMS: [(f64, f64, f64); 3] = [(1.0, 20.0, 1.0), (1.0, 1.0, 0.0), (3.0, 0.5, -2.0)];
pub const PSN_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Psn,
    Losses,
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} max_rel_error={:.3e} tolerance={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// Runs one scope. `negative_control` flips the sign of every analytic
/// gradient so that every check in the scope must fail.
pub fn run_scope(scope: Scope, negative_control: bool) -> Result<Vec<CheckResult>, TensorError> {
    match scope {
        Scope::Psn => Ok(psn_suite(negative_control)),
        Scope::Losses => losses_suite(negative_control),
        Scope::Model => model_suite(negative_control),
    }
}

/// `x` grid of `PSN_GRID_POINTS` evenly spaced points on `[γ − 5/β, γ + 5/β]`.
pub fn psn_grid(beta: f64, gamma: f64) -> Vec<f64> {
    let (lo, hi) = (gamma - 5.0 / beta, gamma + 5.0 / beta);
    (0..PSN_GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (PSN_GRID_POINTS - 1) as f64)
        .collect()
}

/// Analytic partials against central differences of the scalar map, one
/// result per partial over all parameter sets and grid points.
pub fn psn_suite(negative_control: bool) -> Vec<CheckResult> {
    let sign = if negative_control { -1.0 } else { 1.0 };
    let eps = 1e-6;
    let mut worst = [0.0f64; 4];
    for &(a, b, c) in &PSN_GRID_PARAMS {
        for x in psn_grid(b, c) {
            let p = psn_partials(x, a, b, c);
            let numeric = [
                central_difference(|v| psn_value(v, a, b, c), x, eps),
                central_difference(|v| psn_value(x, v, b, c), a, eps),
                central_difference(|v| psn_value(x, a, v, c), b, eps),
                central_difference(|v| psn_value(x, a, b, v), c, eps),
            ];
            let analytic = [p.dx, p.dalpha, p.dbeta, p.dgamma];
            for k in 0..4 {
                worst[k] = worst[k].max(relative_error(sign * analytic[k], numeric[k]));
            }
        }
    }
    ["dF/dx", "dF/dalpha", "dF/dbeta", "dF/dgamma"]
        .iter()
        .zip(worst)
        .map(|(n, e)| CheckResult {
            name: format!("psn {n}"),
            max_rel_error: e,
            tolerance: PSN_TOLERANCE,
        })
        .collect()
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(
        shape,
        Fill::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed,
        },
    )
    .expect("valid shape")
}

/// Identity forward whose backward negates the incoming gradient: a
/// deliberately wrong kernel for the negative control.
struct BrokenSign;

impl CustomOp<f64> for BrokenSign {
    fn name(&self) -> &'static str {
        "broken_sign"
    }

    fn backward(&self, _inputs: &[&Tensor<f64>], _output: &Tensor<f64>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| -v).collect())]
    }
}

fn maybe_broken(g: &mut Graph<f64>, loss: Var, negative_control: bool) -> Result<Var, TensorError> {
    if !negative_control {
        return Ok(loss);
    }
    let v = g.value(loss);
    let out = Tensor::from_vec(v.shape(), v.data().to_vec())?;
    g.custom(&[loss], out, Box::new(BrokenSign))
}

fn check<F>(
    name: &str,
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    negative_control: bool,
) -> Result<CheckResult, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let rep = grad_check(
        |g, v| {
            let l = f(g, v)?;
            maybe_broken(g, l, negative_control)
        },
        params,
        eps,
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: rep.max_rel_error,
        tolerance: tol,
    })
}

/// Cross-entropy, ArcFace and Angular-Softmax on small random batches.
pub fn losses_suite(negative_control: bool) -> Result<Vec<CheckResult>, TensorError> {
    Ok(vec![
        check(
            "losses cross_entropy 4x5",
            |g, v| Ok(cross_entropy(g, v[0], &[0, 4, 2, 1])?.loss),
            &[uniform(&[4, 5], 3)],
            1e-5,
            LOSS_TOLERANCE,
            negative_control,
        )?,
        check(
            "losses arcface 4x8 K=6 s=64 m=0.5",
            |g, v| Ok(arcface(g, v[0], v[1], &[1, 0, 5, 3], 64.0, 0.5)?.loss),
            &[uniform(&[4, 8], 7), uniform(&[6, 8], 8)],
            1e-5,
            LOSS_TOLERANCE,
            negative_control,
        )?,
        check(
            "losses angular_softmax 3x8 K=5 m=4 lambda=5",
            |g, v| Ok(angular_softmax(g, v[0], v[1], &[2, 4, 0], 4, 5.0)?.loss),
            &[uniform(&[3, 8], 11), uniform(&[5, 8], 12)],
            1e-6,
            LOSS_TOLERANCE,
            negative_control,
        )?,
    ])
}

fn to_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Smallest TinyResNet used for the end-to-end check.
pub fn small_resnet_config(mode: PsnMode, loss: LossKind) -> ModelConfig {
    ModelConfig::new(
        BackboneConfig {
            kind: BackboneKind::TinyResNet {
                blocks: vec![1, 1, 1],
                channels: vec![2, 4, 4],
            },
            embedding_dim: 4,
            input_shape: vec![1, 6, 6],
        },
        mode,
        loss,
        3,
    )
}

/// Full-model loss gradient over every parameter. PSN β is moved to 2 so
/// that the check is not dominated by saturated coordinates.
pub fn model_check(
    name: &str,
    model: &PsnetModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    negative_control: bool,
) -> Result<CheckResult, TensorError> {
    let mut params = model.param_tensors();
    if let Some(i) = model.params().iter().position(|p| p.name == "psn.beta") {
        params[i] = Tensor::scalar(2.0);
    }
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let l = model.loss_on_graph(g, v, x, labels, 3).map_err(to_tensor_error)?.loss;
        maybe_broken(g, l, negative_control)
    };
    let rep = grad_check(f, &params, 1e-5)?;
    // α only rescales a vector that ArcFace normalizes away: its exact zero
    // gradient is compared against pure roundoff, so it is left out
    let skip = matches!(model.config().loss, LossKind::ArcFace { .. })
        .then(|| model.params().iter().position(|p| p.name == "psn.alpha"))
        .flatten();
    let max_rel_error = rep
        .per_param
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error,
        tolerance: MODEL_TOLERANCE,
    })
}

/// MLP under each loss plus the smallest TinyResNet, all PSN parameters trainable.
pub fn model_suite(negative_control: bool) -> Result<Vec<CheckResult>, TensorError> {
    let mut out = Vec::new();
    for loss in [
        LossKind::CrossEntropy,
        LossKind::arcface_default(),
        LossKind::angular_softmax_default(),
    ] {
        let cfg = ModelConfig::new(
            BackboneConfig {
                kind: BackboneKind::Mlp { hidden: vec![8] },
                embedding_dim: 4,
                input_shape: vec![5],
            },
            PsnMode::TrainABG,
            loss,
            3,
        );
        let m = build_model::<f64>(&cfg, 7).map_err(to_tensor_error)?;
        out.push(model_check(
            &format!("model mlp {loss}"),
            &m,
            &uniform(&[4, 5], 8),
            &[0, 2, 1, 2],
            negative_control,
        )?);
    }
    let m = build_model::<f64>(&small_resnet_config(PsnMode::TrainABG, LossKind::CrossEntropy), 3)
        .map_err(to_tensor_error)?;
    out.push(model_check(
        &format!(
            "model tiny_resnet ({} params)",
            m.params().iter().map(|p| p.tensor.numel()).sum::<usize>()
        ),
        &m,
        &uniform(&[2, 1, 6, 6], 4),
        &[0, 2],
        negative_control,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_pass_and_negative_control_fails() {
        for scope in [Scope::Psn, Scope::Losses] {
            let ok = run_scope(scope, false).unwrap();
            assert!(ok.iter().all(CheckResult::passed), "{ok:?}");
            let bad = run_scope(scope, true).unwrap();
            assert!(bad.iter().all(|c| !c.passed()), "{bad:?}");
        }
    }

    #[test]
    fn grid_spans_five_slope_widths() {
        let g = psn_grid(20.0, 1.0);
        assert_eq!(g.len(), 100);
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[99] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn model_scope_within_tolerance() {
        let res = model_suite(false).unwrap();
        assert_eq!(res.len(), 4);
        for r in &res {
            println!("{r}");
        }
        assert!(res.iter().all(CheckResult::passed), "{res:?}");
        let bad = model_suite(true).unwrap();
        assert!(bad.iter().all(|c| !c.passed()));
    }
}
