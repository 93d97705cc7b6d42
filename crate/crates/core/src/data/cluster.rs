//! Per-class distance between easy and hard centroids, before and after PSN.

use std::fmt::Write as _;

use super::eval::map_chunks;
use super::{DataError, LabeledData, Result};
use crate::models::PsnetModel;
use crate::psn::{psn_forward, PsnParams};
use crate::tensor::Tensor;
use crate::Scalar;

/// Default true-class softmax threshold below which a sample counts as hard.
pub const DEFAULT_HARD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    pub class: usize,
    pub easy_count: usize,
    pub hard_count: usize,
    pub pre_dist: f64,
    pub post_dist: f64,
    /// `post_dist / pre_dist`, or 1 when `pre_dist` is 0.
    pub ratio: f64,
    /// Largest per-dimension gap between the post-PSN centroids.
    pub max_post_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub classes: Vec<ClassCentroids>,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub mean_ratio: f64,
    /// Hardness threshold when hardness came from model scores.
    pub tau: Option<f64>,
}

impl ClusterReport {
    /// `class,pre_dist,post_dist,ratio` rows, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,pre_dist,post_dist,ratio\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{},{}", c.class, c.pre_dist, c.post_dist, c.ratio);
        }
        let _ = writeln!(s, "mean,{},{},{}", self.mean_pre, self.mean_post, self.mean_ratio);
        s
    }
}

fn centroid(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d];
    for r in rows {
        for (a, b) in c.iter_mut().zip(*r) {
            *a += b;
        }
    }
    c.iter().map(|v| v / rows.len() as f64).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Easy-vs-hard centroid distances per class on `features_pre` and on its
/// PSN image. Classes with no samples at all are skipped; a class with only
/// one partition is an error.
pub fn cluster_centroid_report<T: Scalar>(
    features_pre: &Tensor<T>,
    psn: &PsnParams<T>,
    hardness: &[bool],
    labels: &[usize],
) -> Result<ClusterReport> {
    let shape = features_pre.shape();
    if shape.len() != 2 {
        return Err(DataError::Invalid(format!("features must be [N x d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if hardness.len() != n || labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len().min(hardness.len()),
        });
    }
    let pre: Vec<f64> = features_pre.data().iter().map(|v| v.as_f64()).collect();
    let post: Vec<f64> = psn_forward(features_pre, psn)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut classes = Vec::new();
    for c in 0..k {
        let pick = |buf: &'_ [f64], hard: bool| -> Vec<Vec<f64>> {
            (0..n)
                .filter(|&i| labels[i] == c && hardness[i] == hard)
                .map(|i| buf[i * d..(i + 1) * d].to_vec())
                .collect()
        };
        let (easy_pre, hard_pre) = (pick(&pre, false), pick(&pre, true));
        if easy_pre.is_empty() && hard_pre.is_empty() {
            continue;
        }
        if easy_pre.is_empty() {
            return Err(DataError::MissingPartition {
                class: c,
                partition: "easy",
            });
        }
        if hard_pre.is_empty() {
            return Err(DataError::MissingPartition {
                class: c,
                partition: "hard",
            });
        }
        let cen = |rows: &[Vec<f64>]| centroid(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>(), d);
        let (e0, h0) = (cen(&easy_pre), cen(&hard_pre));
        let (e1, h1) = (cen(&pick(&post, false)), cen(&pick(&post, true)));
        let pre_dist = euclid(&e0, &h0);
        let post_dist = euclid(&e1, &h1);
        classes.push(ClassCentroids {
            class: c,
            easy_count: easy_pre.len(),
            hard_count: hard_pre.len(),
            pre_dist,
            post_dist,
            ratio: if pre_dist == 0.0 { 1.0 } else { post_dist / pre_dist },
            max_post_gap: e1.iter().zip(&h1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        });
    }
    if classes.is_empty() {
        return Err(DataError::Invalid("no samples".into()));
    }
    let mean = |f: fn(&ClassCentroids) -> f64| classes.iter().map(f).sum::<f64>() / classes.len() as f64;
    Ok(ClusterReport {
        mean_pre: mean(|c| c.pre_dist),
        mean_post: mean(|c| c.post_dist),
        mean_ratio: mean(|c| c.ratio),
        tau: None,
        classes,
    })
}

/// Flags samples whose true-class softmax probability is below `tau`.
pub fn hardness_from_scores<T: Scalar>(model: &PsnetModel<T>, data: &LabeledData<T>, tau: f64) -> Result<Vec<bool>> {
    let (logits, k) = map_chunks(data, |b| Ok(model.forward_logits(b)?))?;
    Ok(logits
        .chunks(k)
        .zip(data.labels())
        .map(|(row, &y)| {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (row[y] - m).exp() / z < tau
        })
        .collect())
}
