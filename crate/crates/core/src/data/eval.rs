//! Classification accuracy and k-fold pair verification.

use super::{DataError, LabeledData, Result};
use crate::models::{EmbeddingSource, PsnetModel};
use crate::tensor::Tensor;
use crate::Scalar;

pub const DEFAULT_FOLDS: usize = 10;

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Applies `f` to consecutive row chunks and concatenates the results.
pub(crate) fn map_chunks<T: Scalar>(
    data: &LabeledData<T>,
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(Vec<T>, usize)> {
    let mut out = Vec::new();
    let mut width = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (batch, _) = data.batch(chunk);
        let t = f(&batch)?;
        width = t.shape()[1];
        out.extend_from_slice(t.data());
    }
    Ok((out, width))
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

fn accuracy_over<T: Scalar>(model: &PsnetModel<T>, data: &LabeledData<T>, keep: &[bool]) -> Result<f64> {
    if data.is_empty() {
        return Err(DataError::Invalid("evaluation dataset is empty".into()));
    }
    let (logits, k) = map_chunks(data, |b| Ok(model.forward_logits(b)?))?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (i, (row, &y)) in logits.chunks(k).zip(data.labels()).enumerate() {
        if keep[i] {
            n += 1;
            hit += usize::from(argmax(row) == y);
        }
    }
    if n == 0 {
        return Err(DataError::Invalid("no samples selected for evaluation".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Fraction of samples whose argmax class score equals the label, eval mode.
pub fn evaluate_classification<T: Scalar>(model: &PsnetModel<T>, data: &LabeledData<T>) -> Result<f64> {
    accuracy_over(model, data, &vec![true; data.len()])
}

/// Classification accuracy restricted to samples flagged in `hard`.
pub fn evaluate_hard_accuracy<T: Scalar>(model: &PsnetModel<T>, data: &LabeledData<T>, hard: &[bool]) -> Result<f64> {
    if hard.len() != data.len() {
        return Err(DataError::CountMismatch {
            images: data.len(),
            labels: hard.len(),
        });
    }
    accuracy_over(model, data, hard)
}

/// Verification pairs `(index_a, index_b, same_identity)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairList {
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Parses `index_a index_b {0|1}` lines; blank lines and `#` lines are skipped.
/// Indices must be below `num_samples`.
pub fn parse_pairs(text: &str, num_samples: usize) -> Result<PairList> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let err = |msg: String| DataError::Pairs { line, msg };
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let index = |f: &str| -> Result<usize> {
            let i: usize = f.parse().map_err(|_| err(format!("bad index {f:?}")))?;
            if i >= num_samples {
                return Err(err(format!("index {i} out of range for {num_samples} samples")));
            }
            Ok(i)
        };
        let (a, b) = (index(fields[0])?, index(fields[1])?);
        let same = match fields[2] {
            "0" => false,
            "1" => true,
            f => return Err(err(format!("same flag must be 0 or 1, found {f:?}"))),
        };
        pairs.push((a, b, same));
    }
    let pos = pairs.iter().filter(|p| p.2).count();
    if pos == 0 || pos == pairs.len() {
        return Err(DataError::Pairs {
            line: text.lines().count(),
            msg: "need at least one positive and one negative pair".into(),
        });
    }
    Ok(PairList { pairs })
}

/// Contiguous fold blocks: pair `i` of `n` goes to fold `i * k / n`.
pub fn fold_assignment(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n).collect()
}

/// Highest-accuracy threshold over midpoints between consecutive distinct
/// similarities (plus one below and one above all); a pair is "same" when
/// `sim >= t`. Ties go to the smaller threshold.
fn best_threshold(mut items: Vec<(f64, bool)>) -> f64 {
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = items.iter().filter(|p| p.1).count() as i64;
    // threshold below everything: all predicted same
    let mut correct = pos;
    let mut best = (correct, items[0].0 - 1.0);
    let mut i = 0;
    while i < items.len() {
        let v = items[i].0;
        while i < items.len() && items[i].0 == v {
            correct += if items[i].1 { -1 } else { 1 };
            i += 1;
        }
        let t = if i < items.len() {
            0.5 * (v + items[i].0)
        } else {
            v + 1.0
        };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    best.1
}

/// Mean held-out accuracy over the folds in `fold_of`.
pub fn verification_accuracy(sims: &[f64], same: &[bool], fold_of: &[usize]) -> Result<f64> {
    if sims.len() != same.len() || sims.len() != fold_of.len() {
        return Err(DataError::Invalid("similarity, label and fold lengths differ".into()));
    }
    if let Some(i) = sims.iter().position(|s| !s.is_finite()) {
        return Err(DataError::Invalid(format!("non-finite similarity for pair {i}")));
    }
    let k = fold_of.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for f in 0..k {
        let train: Vec<(f64, bool)> = (0..sims.len())
            .filter(|&i| fold_of[i] != f)
            .map(|i| (sims[i], same[i]))
            .collect();
        let test: Vec<usize> = (0..sims.len()).filter(|&i| fold_of[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            return Err(DataError::Invalid(format!(
                "fold {f} leaves an empty train or test split"
            )));
        }
        let t = best_threshold(train);
        let hit = test.iter().filter(|&&i| (sims[i] >= t) == same[i]).count();
        total += hit as f64 / test.len() as f64;
    }
    Ok(total / k as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    dot / (na * nb).sqrt()
}

/// Cosine similarity per pair, rejecting zero-norm embeddings.
pub(crate) fn pair_similarities(emb: &[f64], dim: usize, pairs: &PairList) -> Result<Vec<f64>> {
    let row = |i: usize| -> Result<&[f64]> {
        let r = &emb[i * dim..(i + 1) * dim];
        if r.iter().all(|&v| v == 0.0) {
            return Err(DataError::ZeroNormEmbedding { index: i });
        }
        Ok(r)
    };
    pairs
        .pairs
        .iter()
        .map(|&(a, b, _)| Ok(cosine(row(a)?, row(b)?)))
        .collect()
}

/// k-fold best-threshold verification accuracy on model embeddings.
pub fn evaluate_verification<T: Scalar>(
    model: &PsnetModel<T>,
    data: &LabeledData<T>,
    pairs: &PairList,
    folds: usize,
    source: EmbeddingSource,
) -> Result<f64> {
    if folds < 2 || pairs.len() < folds {
        return Err(DataError::Invalid(format!(
            "{} pairs cannot form {folds} folds",
            pairs.len()
        )));
    }
    if let Some(&(a, b, _)) = pairs.pairs.iter().find(|p| p.0 >= data.len() || p.1 >= data.len()) {
        return Err(DataError::Invalid(format!(
            "pair ({a}, {b}) out of range for {} samples",
            data.len()
        )));
    }
    let (emb, dim) = map_chunks(data, |b| Ok(model.forward_embeddings(b, source)?))?;
    let emb: Vec<f64> = emb.iter().map(|v| v.as_f64()).collect();
    let sims = pair_similarities(&emb, dim, pairs)?;
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.2).collect();
    verification_accuracy(&sims, &same, &fold_assignment(pairs.len(), folds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::models::{build_model, BackboneConfig, BackboneKind, ModelConfig};
    use crate::psn::PsnMode;
    use proptest::prelude::*;

    #[test]
    fn pairs_parsing() {
        let p = parse_pairs("# header\n0 1 1\n\n2 3 0\n", 4).unwrap();
        assert_eq!(p.pairs, vec![(0, 1, true), (2, 3, false)]);
        match parse_pairs("0 1 1\n0 9 0\n", 4) {
            Err(DataError::Pairs { line: 2, msg }) => assert!(msg.contains("out of range")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_pairs("0 1 2\n", 4),
            Err(DataError::Pairs { line: 1, .. })
        ));
        assert!(matches!(parse_pairs("0 1\n", 4), Err(DataError::Pairs { line: 1, .. })));
        assert!(parse_pairs("0 1 1\n1 2 1\n", 4).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let pairs = PairList {
            pairs: vec![(0, 1, true)],
        };
        assert!(matches!(
            pair_similarities(&[1.0, 0.0, 0.0, 0.0], 2, &pairs),
            Err(DataError::ZeroNormEmbedding { index: 1 })
        ));
    }

    #[test]
    fn folds_are_contiguous() {
        assert_eq!(fold_assignment(5, 2), vec![0, 0, 0, 1, 1]);
        let f = fold_assignment(600, 10);
        assert!(f.windows(2).all(|w| w[0] <= w[1]));
        assert!((0..10).all(|k| f.iter().filter(|&&x| x == k).count() == 60));
    }

    #[test]
    fn threshold_ties_prefer_smaller() {
        // any threshold in (0.2, 0.8) is perfect; the first midpoint wins
        assert_eq!(best_threshold(vec![(0.2, false), (0.8, true)]), 0.5);
        // thresholds 0.15 and 0.35 both give 2/3; smaller is kept
        assert!((best_threshold(vec![(0.1, false), (0.2, true), (0.5, false)]) - 0.15).abs() < 1e-15);
        // identical similarities: only the outer thresholds exist
        assert_eq!(best_threshold(vec![(1.0, true), (1.0, false), (1.0, true)]), 0.0);
    }

    #[test]
    fn separable_pairs_give_full_accuracy() {
        let n = 40;
        let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let sims: Vec<f64> = (0..n)
            .map(|i| {
                if same[i] {
                    0.6 + i as f64 * 1e-3
                } else {
                    0.1 + i as f64 * 1e-3
                }
            })
            .collect();
        for k in [2, 4, 10] {
            assert_eq!(
                verification_accuracy(&sims, &same, &fold_assignment(n, k)).unwrap(),
                1.0
            );
        }
    }

    proptest! {
        #[test]
        fn pair_order_invariance(sims in prop::collection::vec(-1.0f64..1.0, 20), flags in prop::collection::vec(any::<bool>(), 20), seed in any::<u64>()) {
            let folds = fold_assignment(20, 4);
            let base = verification_accuracy(&sims, &flags, &folds).unwrap();
            let mut perm: Vec<usize> = (0..20).collect();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = perm.iter().map(|&i| sims[i]).collect();
            let f2: Vec<bool> = perm.iter().map(|&i| flags[i]).collect();
            let fo2: Vec<usize> = perm.iter().map(|&i| folds[i]).collect();
            prop_assert_eq!(base, verification_accuracy(&s2, &f2, &fo2).unwrap());
        }

        #[test]
        fn embedding_scale_invariance(emb in prop::collection::vec(0.1f64..2.0, 24), c in 0.01f64..100.0) {
            let pairs = PairList { pairs: (0..12).map(|i| (i % 6, (i * 5 + 1) % 6, i % 3 == 0)).collect() };
            let same: Vec<bool> = pairs.pairs.iter().map(|p| p.2).collect();
            let folds = fold_assignment(12, 3);
            let a = verification_accuracy(&pair_similarities(&emb, 4, &pairs).unwrap(), &same, &folds).unwrap();
            let scaled: Vec<f64> = emb.iter().map(|v| v * c).collect();
            let b = verification_accuracy(&pair_similarities(&scaled, 4, &pairs).unwrap(), &same, &folds).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn constant_predictor() -> PsnetModel<f64> {
        let cfg = ModelConfig::new(
            BackboneConfig {
                kind: BackboneKind::Mlp { hidden: vec![4] },
                embedding_dim: 3,
                input_shape: vec![2],
            },
            PsnMode::Disabled,
            LossKind::CrossEntropy,
            3,
        );
        let mut m = build_model::<f64>(&cfg, 1).unwrap();
        for p in m.params_mut() {
            if p.name == "classifier.weight" {
                p.tensor = Tensor::zeros(p.tensor.shape()).unwrap();
            }
            if p.name == "classifier.bias" {
                p.tensor = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
            }
        }
        m
    }

    #[test]
    fn constant_predictor_accuracy() {
        let m = constant_predictor();
        let x = Tensor::from_vec(&[4, 2], vec![0.3, -1.0, 2.0, 0.5, -0.2, 0.1, 1.0, 1.0]).unwrap();
        let all0 = LabeledData::new(x.clone(), vec![0; 4], 3).unwrap();
        assert_eq!(evaluate_classification(&m, &all0).unwrap(), 1.0);

        let n = 3000;
        let x = Tensor::<f64>::zeros(&[n, 2]).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let labels: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let acc = evaluate_classification(&m, &LabeledData::new(x, labels, 3).unwrap()).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.03, "{acc}");

        let empty = super::super::Dataset {
            images: vec![],
            image_shape: vec![1, 2, 2],
            labels: vec![],
            num_classes: 3,
        };
        assert!(empty.to_labeled::<f64>().is_err());
        let hard = evaluate_hard_accuracy(&m, &all0.subset(&[0, 1]), &[false, true]).unwrap();
        assert_eq!(hard, 1.0);
    }
}
