//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::losses::{LambdaSchedule, LossKind};
use crate::models::{BackboneConfig, BackboneKind, EmbeddingSource, ModelConfig};
use crate::psn::PsnMode;
use crate::training::TrainConfig;

/// Every recognised key with its default, in documentation order. Keys
/// without a default must be set when the corresponding source is used.
pub const KEYS: &[(&str, &str)] = &[
    ("model.backbone", "tiny_resnet"),
    ("model.hidden", "128"),
    ("model.blocks", "2,2,2"),
    ("model.channels", "16,32,64"),
    ("model.embedding_dim", "64"),
    ("psn.mode", "train_bg"),
    ("psn.before_norm", "true"),
    ("loss.kind", "cross_entropy"),
    ("loss.arcface_s", "64"),
    ("loss.arcface_m", "0.5"),
    ("loss.sphere_m", "4"),
    ("loss.sphere_lambda_base", "1000"),
    ("loss.sphere_lambda_min", "5"),
    ("loss.sphere_decay", "0.1"),
    ("train.batch_size", "64"),
    ("train.epochs", "20"),
    ("train.lr", "0.01"),
    ("train.drop_epochs", "8,12,16"),
    ("train.drop_factor", "10"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0"),
    ("train.seed", "0"),
    ("data.source", "idx"),
    ("data.num_classes", "10"),
    ("data.train_images", ""),
    ("data.train_labels", ""),
    ("data.test_images", ""),
    ("data.test_labels", ""),
    ("data.synthetic.classes", "10"),
    ("data.synthetic.per_class", "200"),
    ("data.synthetic.hard_fraction", "0.2"),
    ("data.synthetic.dim", "16"),
    ("data.synthetic.separation", "4"),
    ("data.synthetic.hard_offset", "3"),
    ("data.synthetic.seed", "1"),
    ("data.synthetic.test_seed", "2"),
    ("eval.embedding", "post_psn"),
    ("eval.folds", "10"),
    ("eval.hard_threshold", "0.5"),
    ("output.dir", "out"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based line in the config file, when the error is tied to one.
    pub line: Option<usize>,
    pub key: Option<String>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: {k}: {}", self.msg),
            (Some(l), None) => write!(f, "line {l}: {}", self.msg),
            (None, Some(k)) => write!(f, "{k}: {}", self.msg),
            (None, None) => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
        num_classes: usize,
    },
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSource {
    pub classes: usize,
    pub per_class: usize,
    pub hard_fraction: f64,
    pub dim: usize,
    pub separation: f64,
    pub hard_offset: f64,
    pub seed: u64,
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneChoice {
    Mlp { hidden: Vec<usize> },
    TinyResNet { blocks: Vec<usize>, channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneChoice,
    pub embedding_dim: usize,
    pub psn_mode: PsnMode,
    pub psn_before_norm: bool,
    pub loss: LossKind,
    pub train: TrainConfig,
    pub data: DataSource,
    pub eval_embedding: EmbeddingSource,
    pub eval_folds: usize,
    pub hard_threshold: f64,
    pub output_dir: PathBuf,
}

/// Raw values after the grammar pass, with the line each key came from.
struct Entries {
    values: Vec<(String, String, Option<usize>)>,
}

impl Entries {
    fn get(&self, key: &str) -> (&str, Option<usize>) {
        let (_, v, l) = self
            .values
            .iter()
            .find(|(k, _, _)| k == key)
            .expect("every key has an entry");
        (v.as_str(), *l)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let (v, line) = self.get(key);
        v.parse().map_err(|e: T::Err| ConfigError {
            line,
            key: Some(key.into()),
            msg: format!("invalid value {v:?}: {e}"),
        })
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let (v, line) = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError {
                    line,
                    key: Some(key.into()),
                    msg: format!("invalid integer list {v:?}"),
                })
            })
            .collect()
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.get(key).1,
            key: Some(key.into()),
            msg: msg.into(),
        }
    }

    fn path(&self, key: &str, base: &Path) -> Option<PathBuf> {
        let (v, _) = self.get(key);
        (!v.is_empty()).then(|| base.join(v))
    }
}

/// Splits the text into key/value pairs. `#` starts a comment; blank lines
/// are ignored; unknown and repeated keys are errors.
fn read_entries(text: &str) -> Result<Entries, ConfigError> {
    let known: HashSet<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    let mut values: Vec<(String, String, Option<usize>)> =
        KEYS.iter().map(|(k, d)| (k.to_string(), d.to_string(), None)).collect();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError {
                line: Some(line),
                key: None,
                msg: format!("expected `key = value`, found {body:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if !known.contains(k) {
            return Err(ConfigError {
                line: Some(line),
                key: Some(k.into()),
                msg: "unknown key".into(),
            });
        }
        if !seen.insert(k.to_string()) {
            return Err(ConfigError {
                line: Some(line),
                key: Some(k.into()),
                msg: "key set twice".into(),
            });
        }
        let slot = values.iter_mut().find(|(key, _, _)| key == k).expect("known key");
        slot.1 = v.to_string();
        slot.2 = Some(line);
    }
    Ok(Entries { values })
}

fn parse_bool(e: &Entries, key: &str) -> Result<bool, ConfigError> {
    match e.get(key).0 {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        v => Err(e.err(key, format!("expected true or false, found {v:?}"))),
    }
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let e = read_entries(text)?;
        let backbone = match e.get("model.backbone").0 {
            "mlp" => BackboneChoice::Mlp {
                hidden: e.list("model.hidden")?,
            },
            "tiny_resnet" => BackboneChoice::TinyResNet {
                blocks: e.list("model.blocks")?,
                channels: e.list("model.channels")?,
            },
            other => {
                return Err(e.err(
                    "model.backbone",
                    format!("expected mlp or tiny_resnet, found {other:?}"),
                ))
            }
        };
        let loss = match e.get("loss.kind").0 {
            "cross_entropy" => LossKind::CrossEntropy,
            "arcface" => LossKind::ArcFace {
                s: e.parse("loss.arcface_s")?,
                m: e.parse("loss.arcface_m")?,
            },
            "angular_softmax" => LossKind::AngularSoftmax {
                m: e.parse("loss.sphere_m")?,
                lambda: LambdaSchedule {
                    base: e.parse("loss.sphere_lambda_base")?,
                    min: e.parse("loss.sphere_lambda_min")?,
                    decay: e.parse("loss.sphere_decay")?,
                },
            },
            other => {
                return Err(e.err(
                    "loss.kind",
                    format!("expected cross_entropy, arcface or angular_softmax, found {other:?}"),
                ))
            }
        };
        loss.validate().map_err(|err| e.err("loss.kind", err.to_string()))?;

        let train = TrainConfig {
            batch_size: e.parse("train.batch_size")?,
            epochs: e.parse("train.epochs")?,
            lr0: e.parse("train.lr")?,
            drop_epochs: e.list("train.drop_epochs")?,
            drop_factor: e.parse("train.drop_factor")?,
            momentum: e.parse("train.momentum")?,
            weight_decay: e.parse("train.weight_decay")?,
            seed: e.parse("train.seed")?,
        };
        train.validate().map_err(|err| {
            let key = ["train.drop_epochs", "train.epochs"]
                .into_iter()
                .find(|k| e.get(k).1.is_some())
                .unwrap_or("train.drop_epochs");
            e.err(key, err.to_string())
        })?;

        let data = match e.get("data.source").0 {
            "idx" => {
                let need = |k: &str| {
                    e.path(k, base)
                        .ok_or_else(|| e.err(k, "required when data.source = idx"))
                };
                let test = match (e.path("data.test_images", base), e.path("data.test_labels", base)) {
                    (Some(i), Some(l)) => Some((i, l)),
                    (None, None) => None,
                    _ => return Err(e.err("data.test_images", "test images and labels must be set together")),
                };
                DataSource::Idx {
                    train_images: need("data.train_images")?,
                    train_labels: need("data.train_labels")?,
                    test,
                    num_classes: e.parse("data.num_classes")?,
                }
            }
            "synthetic" => DataSource::Synthetic(SyntheticSource {
                classes: e.parse("data.synthetic.classes")?,
                per_class: e.parse("data.synthetic.per_class")?,
                hard_fraction: e.parse("data.synthetic.hard_fraction")?,
                dim: e.parse("data.synthetic.dim")?,
                separation: e.parse("data.synthetic.separation")?,
                hard_offset: e.parse("data.synthetic.hard_offset")?,
                seed: e.parse("data.synthetic.seed")?,
                test_seed: e.parse("data.synthetic.test_seed")?,
            }),
            other => return Err(e.err("data.source", format!("expected idx or synthetic, found {other:?}"))),
        };

        let eval_embedding = match e.get("eval.embedding").0 {
            "post_psn" => EmbeddingSource::PostPsn,
            "pre_psn" => EmbeddingSource::PrePsn,
            other => {
                return Err(e.err(
                    "eval.embedding",
                    format!("expected post_psn or pre_psn, found {other:?}"),
                ))
            }
        };
        let eval_folds: usize = e.parse("eval.folds")?;
        if eval_folds < 2 {
            return Err(e.err("eval.folds", "must be >= 2"));
        }
        let hard_threshold: f64 = e.parse("eval.hard_threshold")?;
        if !(hard_threshold > 0.0 && hard_threshold <= 1.0) {
            return Err(e.err("eval.hard_threshold", "must be in (0, 1]"));
        }
        let cfg = Self {
            backbone,
            embedding_dim: e.parse("model.embedding_dim")?,
            psn_mode: e.parse("psn.mode")?,
            psn_before_norm: parse_bool(&e, "psn.before_norm")?,
            loss,
            train,
            data,
            eval_embedding,
            eval_folds,
            hard_threshold,
            output_dir: base.join(e.get("output.dir").0),
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError {
            line: None,
            key: None,
            msg: format!("{}: {err}", path.display()),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn num_classes(&self) -> usize {
        match &self.data {
            DataSource::Idx { num_classes, .. } => *num_classes,
            DataSource::Synthetic(s) => s.classes,
        }
    }

    /// Model configuration for samples of the given shape.
    pub fn model_config(&self, input_shape: &[usize]) -> ModelConfig {
        let kind = match &self.backbone {
            BackboneChoice::Mlp { hidden } => BackboneKind::Mlp { hidden: hidden.clone() },
            BackboneChoice::TinyResNet { blocks, channels } => BackboneKind::TinyResNet {
                blocks: blocks.clone(),
                channels: channels.clone(),
            },
        };
        let mut m = ModelConfig::new(
            BackboneConfig {
                kind,
                embedding_dim: self.embedding_dim,
                input_shape: input_shape.to_vec(),
            },
            self.psn_mode,
            self.loss,
            self.num_classes(),
        );
        m.psn_before_norm = self.psn_before_norm;
        m
    }
}
