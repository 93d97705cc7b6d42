//! Backbones and PSNet assembly: backbone → abstract features → PSN →
//! class-score layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::losses::{class_scores, compute_loss, normalize_rows, LossKind, LossOutput};
use crate::psn::{self, PsnMode, PsnParams};
use crate::tensor::{BnMode, Graph, RunningStats, Tensor, TensorError, Var};
use crate::Scalar;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match configured sample shape {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("state mismatch: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneKind {
    Mlp { hidden: Vec<usize> },
    TinyResNet { blocks: Vec<usize>, channels: Vec<usize> },
}

impl BackboneKind {
    pub fn tiny_resnet() -> Self {
        BackboneKind::TinyResNet {
            blocks: vec![2, 2, 2],
            channels: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub embedding_dim: usize,
    /// Per-sample input shape: `[d]` or `[C, H, W]` for MLPs, `[C, H, W]` for the ResNet.
    pub input_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub psn_mode: PsnMode,
    pub loss: LossKind,
    pub num_classes: usize,
    /// For normalized losses: apply PSN before the L2 normalization (default)
    /// or to the already normalized feature.
    pub psn_before_norm: bool,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, psn_mode: PsnMode, loss: LossKind, num_classes: usize) -> Self {
        Self {
            backbone,
            psn_mode,
            loss,
            num_classes,
            psn_before_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if b.embedding_dim < 2 {
            return Err(ModelError::Config(format!(
                "embedding_dim must be >= 2, got {}",
                b.embedding_dim
            )));
        }
        if b.input_shape.is_empty() || b.input_shape.contains(&0) {
            return Err(ModelError::Config(format!("invalid input shape {:?}", b.input_shape)));
        }
        match &b.kind {
            BackboneKind::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(ModelError::Config("MLP hidden sizes must be positive".into()));
                }
            }
            BackboneKind::TinyResNet { blocks, channels } => {
                if b.input_shape.len() != 3 {
                    return Err(ModelError::Config(format!(
                        "TinyResNet needs a [C, H, W] input shape, got {:?}",
                        b.input_shape
                    )));
                }
                if blocks.is_empty() || blocks.len() != channels.len() {
                    return Err(ModelError::Config(
                        "TinyResNet needs one block count per stage channel width".into(),
                    ));
                }
                if blocks.contains(&0) || channels.contains(&0) {
                    return Err(ModelError::Config(
                        "TinyResNet block counts and channels must be positive".into(),
                    ));
                }
            }
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    /// Projected onto `[PARAM_FLOOR, ∞)` after each update (PSN α, β).
    pub positive: bool,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: usize,
    scale: usize,
    shift: usize,
    stats: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    first: ConvBn,
    second: ConvBn,
    proj: Option<ConvBn>,
}

#[derive(Debug, Clone)]
enum Arch {
    Mlp {
        hidden: Vec<Linear>,
        embed: Linear,
    },
    ResNet {
        stem: ConvBn,
        blocks: Vec<Block>,
        embed: Linear,
    },
}

/// Which embedding verification compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    PrePsn,
    PostPsn,
}

enum Stats<'a, T> {
    Update(&'a mut [RunningStats<T>]),
    Frozen(&'a [RunningStats<T>]),
}

/// Loss, prediction count and per-parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub correct: usize,
    /// Aligned with [`PsnetModel::params`]; `None` for frozen parameters.
    pub grads: Vec<Option<Vec<T>>>,
}

#[derive(Debug, Clone)]
pub struct PsnetModel<T: Scalar> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    bn_stats: Vec<(String, RunningStats<T>)>,
    arch: Arch,
    classifier: Linear,
    psn: Option<[usize; 3]>,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
    bn_stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool, positive: bool) -> usize {
        self.params.push(Param {
            name,
            tensor,
            trainable,
            positive,
        });
        self.params.len() - 1
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(&mut self.rng))).collect();
        Ok(self.push(name, Tensor::from_vec(shape, data)?, true, false))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<usize> {
        Ok(self.push(name, Tensor::zeros(shape)?, true, false))
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize, bias: bool) -> Result<Linear> {
        let w = self.he(format!("{name}.weight"), &[outputs, inputs], inputs)?;
        let b = if bias {
            self.zeros(format!("{name}.bias"), &[outputs])?
        } else {
            usize::MAX
        };
        Ok(Linear { w, b })
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<ConvBn> {
        let conv = self.he(format!("{name}.conv.weight"), &[cout, cin, k, k], cin * k * k)?;
        let scale = self.push(
            format!("{name}.bn.scale"),
            Tensor::new(&[cout], crate::tensor::Fill::Constant(T::one()))?,
            true,
            false,
        );
        let shift = self.zeros(format!("{name}.bn.shift"), &[cout])?;
        self.bn_stats.push((format!("{name}.bn"), RunningStats::new(cout)));
        Ok(ConvBn {
            conv,
            scale,
            shift,
            stats: self.bn_stats.len() - 1,
            stride,
            pad: k / 2,
        })
    }
}

/// Builds a model with deterministic He-style initialization from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<PsnetModel<T>> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        bn_stats: Vec::new(),
    };
    let bb = &config.backbone;
    let arch = match &bb.kind {
        BackboneKind::Mlp { hidden } => {
            let mut width: usize = bb.input_shape.iter().product();
            let mut layers = Vec::new();
            for (i, &h) in hidden.iter().enumerate() {
                layers.push(b.linear(&format!("mlp.{i}"), width, h, true)?);
                width = h;
            }
            let embed = b.linear("embed", width, bb.embedding_dim, true)?;
            Arch::Mlp { hidden: layers, embed }
        }
        BackboneKind::TinyResNet { blocks, channels } => {
            let stem = b.conv_bn("stem", bb.input_shape[0], channels[0], 3, 1)?;
            let mut cin = channels[0];
            let mut list = Vec::new();
            for (stage, (&count, &cout)) in blocks.iter().zip(channels).enumerate() {
                for i in 0..count {
                    let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                    let name = format!("stage{stage}.block{i}");
                    let first = b.conv_bn(&format!("{name}.a"), cin, cout, 3, stride)?;
                    let second = b.conv_bn(&format!("{name}.b"), cout, cout, 3, 1)?;
                    let proj = if stride != 1 || cin != cout {
                        Some(b.conv_bn(&format!("{name}.proj"), cin, cout, 1, stride)?)
                    } else {
                        None
                    };
                    list.push(Block { first, second, proj });
                    cin = cout;
                }
            }
            let embed = b.linear("embed", cin, bb.embedding_dim, true)?;
            Arch::ResNet {
                stem,
                blocks: list,
                embed,
            }
        }
    };
    let psn = match config.psn_mode.params::<T>() {
        None => None,
        Some(p) => {
            let a = b.push("psn.alpha".into(), Tensor::scalar(p.alpha()), p.alpha_trainable, true);
            let be = b.push("psn.beta".into(), Tensor::scalar(p.beta()), p.beta_trainable, true);
            let g = b.push("psn.gamma".into(), Tensor::scalar(p.gamma()), p.gamma_trainable, false);
            Some([a, be, g])
        }
    };
    let classifier = b.linear(
        "classifier",
        bb.embedding_dim,
        config.num_classes,
        !config.loss.is_normalized(),
    )?;
    Ok(PsnetModel {
        config: config.clone(),
        params: b.params,
        bn_stats: b.bn_stats,
        arch,
        classifier,
        psn,
    })
}

impl<T: Scalar> PsnetModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.name.starts_with("psn."))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn psn_params(&self) -> Option<PsnParams<T>> {
        self.psn.map(|[a, b, g]| {
            let v = |i: usize| self.params[i].tensor.item();
            PsnParams::new(v(a), v(b), v(g))
                .expect("projection keeps alpha and beta positive")
                .with_trainable(
                    self.params[a].trainable,
                    self.params[b].trainable,
                    self.params[g].trainable,
                )
        })
    }

    /// Parameter values followed by BN running statistics, in a fixed order.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> =
            self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for (name, s) in &self.bn_stats {
            let c = s.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::from_vec(&[c], s.mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::from_vec(&[c], s.var.clone()).expect("channel vector"),
            ));
        }
        out
    }

    /// Replaces every parameter and running statistic; names and shapes must
    /// match this model's [`PsnetModel::state`] exactly.
    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() {
            return Err(ModelError::State(format!(
                "expected {} tensors, got {}",
                expected.len(),
                state.len()
            )));
        }
        for ((en, et), (gn, gt)) in expected.iter().zip(state) {
            if en != gn {
                return Err(ModelError::State(format!("expected tensor `{en}`, found `{gn}`")));
            }
            if et.shape() != gt.shape() {
                return Err(ModelError::State(format!(
                    "tensor `{en}` has shape {:?}, model expects {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        let np = self.params.len();
        for (p, (_, t)) in self.params.iter_mut().zip(state) {
            p.tensor = Tensor::from_vec(t.shape(), t.data().to_vec())?;
        }
        for (i, (_, s)) in self.bn_stats.iter_mut().enumerate() {
            s.mean = state[np + 2 * i].1.data().to_vec();
            s.var = state[np + 2 * i + 1].1.data().to_vec();
        }
        Ok(())
    }

    /// Copies of every parameter tensor, for finite-difference checks.
    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    fn bind(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| Ok(g.leaf(p.tensor.clone().with_requires_grad(p.trainable))?))
            .collect()
    }

    fn input_var(&self, g: &mut Graph<T>, batch: &Tensor<T>) -> Result<Var> {
        let expected = &self.config.backbone.input_shape;
        let s = batch.shape();
        let per: usize = expected.iter().product();
        let ok = match &self.config.backbone.kind {
            BackboneKind::Mlp { .. } => s.len() >= 2 && s[1..].iter().product::<usize>() == per,
            BackboneKind::TinyResNet { .. } => s.len() == 4 && s[1..] == expected[..],
        };
        if !ok {
            return Err(ModelError::InputShape {
                expected: expected.clone(),
                got: s.to_vec(),
            });
        }
        let x = g.constant(batch.clone())?;
        Ok(match &self.config.backbone.kind {
            BackboneKind::Mlp { .. } if s.len() != 2 => g.reshape(x, &[s[0], per])?,
            _ => x,
        })
    }

    fn conv_bn(&self, g: &mut Graph<T>, vars: &[Var], x: Var, l: &ConvBn, stats: &mut Stats<'_, T>) -> Result<Var> {
        let y = g.conv2d(x, vars[l.conv], l.stride, l.pad)?;
        let mode = match stats {
            Stats::Update(s) => BnMode::Train(&mut s[l.stats]),
            Stats::Frozen(s) => BnMode::Eval(&s[l.stats]),
        };
        Ok(g.batch_norm2d(y, vars[l.scale], vars[l.shift], T::lit(BN_EPS), mode)?)
    }

    fn backbone(&self, g: &mut Graph<T>, vars: &[Var], x: Var, stats: &mut Stats<'_, T>) -> Result<Var> {
        match &self.arch {
            Arch::Mlp { hidden, embed } => {
                let mut h = x;
                for l in hidden {
                    let z = g.linear(h, vars[l.w], Some(vars[l.b]))?;
                    h = g.relu(z)?;
                }
                Ok(g.linear(h, vars[embed.w], Some(vars[embed.b]))?)
            }
            Arch::ResNet { stem, blocks, embed } => {
                let s = self.conv_bn(g, vars, x, stem, stats)?;
                let mut h = g.relu(s)?;
                for blk in blocks {
                    let a = self.conv_bn(g, vars, h, &blk.first, stats)?;
                    let a = g.relu(a)?;
                    let b = self.conv_bn(g, vars, a, &blk.second, stats)?;
                    let shortcut = match &blk.proj {
                        Some(p) => self.conv_bn(g, vars, h, p, stats)?,
                        None => h,
                    };
                    let sum = g.add(b, shortcut)?;
                    h = g.relu(sum)?;
                }
                let pooled = g.global_avg_pool(h)?;
                Ok(g.linear(pooled, vars[embed.w], Some(vars[embed.b]))?)
            }
        }
    }

    fn apply_psn(&self, g: &mut Graph<T>, vars: &[Var], features: Var) -> Result<Var> {
        let Some([a, b, c]) = self.psn else {
            return Ok(features);
        };
        if self.config.loss.is_normalized() && !self.config.psn_before_norm {
            let n = normalize_rows(g, features)?;
            return Ok(psn::psn(g, n, vars[a], vars[b], vars[c])?);
        }
        Ok(psn::psn(g, features, vars[a], vars[b], vars[c])?)
    }

    fn bias_var(&self, vars: &[Var]) -> Option<Var> {
        (self.classifier.b != usize::MAX).then(|| vars[self.classifier.b])
    }

    /// Records the full training loss for `batch` on `g` using caller-bound
    /// parameter nodes. BN layers run in train mode on scratch statistics.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &Tensor<T>,
        labels: &[usize],
        iteration: u64,
    ) -> Result<LossOutput<T>> {
        let mut scratch: Vec<RunningStats<T>> = self.bn_stats.iter().map(|(_, s)| s.clone()).collect();
        self.loss_with_stats(g, vars, batch, labels, iteration, &mut Stats::Update(&mut scratch))
    }

    fn loss_with_stats(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &Tensor<T>,
        labels: &[usize],
        iteration: u64,
        stats: &mut Stats<'_, T>,
    ) -> Result<LossOutput<T>> {
        let x = self.input_var(g, batch)?;
        let f = self.backbone(g, vars, x, stats)?;
        let post = self.apply_psn(g, vars, f)?;
        Ok(compute_loss(
            g,
            &self.config.loss,
            post,
            vars[self.classifier.w],
            self.bias_var(vars),
            labels,
            iteration,
        )?)
    }

    /// One forward/backward pass in train mode; BN running stats are updated.
    pub fn train_step(&mut self, batch: &Tensor<T>, labels: &[usize], iteration: u64) -> Result<StepOutput<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let mut stats: Vec<RunningStats<T>> = self.bn_stats.iter().map(|(_, s)| s.clone()).collect();
        let out = self.loss_with_stats(&mut g, &vars, batch, labels, iteration, &mut Stats::Update(&mut stats))?;
        g.backward(out.loss)?;
        for ((_, s), new) in self.bn_stats.iter_mut().zip(stats) {
            *s = new;
        }
        let grads = self
            .params
            .iter()
            .zip(&vars)
            .map(|(p, v)| {
                p.trainable.then(|| {
                    g.grad(*v)
                        .map_or_else(|| vec![T::zero(); p.tensor.numel()], <[T]>::to_vec)
                })
            })
            .collect();
        Ok(StepOutput {
            loss: out.value,
            correct: out.correct_count,
            grads,
        })
    }

    fn eval_graph(&self, batch: &Tensor<T>) -> Result<(Graph<T>, Vec<Var>, Var, Var)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let x = self.input_var(&mut g, batch)?;
        let frozen: Vec<RunningStats<T>> = self.bn_stats.iter().map(|(_, s)| s.clone()).collect();
        let f = self.backbone(&mut g, &vars, x, &mut Stats::Frozen(&frozen))?;
        let post = self.apply_psn(&mut g, &vars, f)?;
        Ok((g, vars, f, post))
    }

    /// Pre-PSN abstract features `[N × embedding_dim]`, eval mode.
    pub fn forward_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let (g, _, f, _) = self.eval_graph(batch)?;
        Ok(detached(g.value(f)))
    }

    /// Features entering the class-score layer (post-PSN), eval mode.
    pub fn forward_embeddings(&self, batch: &Tensor<T>, source: EmbeddingSource) -> Result<Tensor<T>> {
        let (g, _, f, post) = self.eval_graph(batch)?;
        Ok(detached(g.value(match source {
            EmbeddingSource::PrePsn => f,
            EmbeddingSource::PostPsn => post,
        })))
    }

    /// Margin-free class scores `[N × K]`, eval mode.
    pub fn forward_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut g, vars, _, post) = self.eval_graph(batch)?;
        let bias = self.bias_var(&vars);
        let l = class_scores(&mut g, &self.config.loss, post, vars[self.classifier.w], bias)?;
        Ok(detached(g.value(l)))
    }
}

fn detached<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(t.shape(), t.data().to_vec()).expect("valid tensor")
}
