//! Gaussian class clusters with a small displaced "hard" sub-cluster per class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, LabeledData, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Class centroids depend only on `(num_classes, dim, separation)`, so train
/// and test sets drawn with different seeds share one layout.
const LAYOUT_SEED: u64 = 0x5053_4e45_5453_4554;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub per_class: usize,
    /// Fraction of each class drawn from the hard cluster, in `(0, 0.5)`.
    pub hard_fraction: f64,
    pub dim: usize,
    /// Distance of every class centroid from the origin.
    pub separation: f64,
    /// Distance the hard cluster is moved toward the next class's centroid.
    pub hard_offset: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet<T> {
    pub data: LabeledData<T>,
    /// Ground-truth hardness flag per sample.
    pub hard: Vec<bool>,
}

impl SyntheticParams {
    pub fn hard_per_class(&self) -> usize {
        (self.per_class as f64 * self.hard_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Invalid(format!("synthetic: {m}")));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim == 0 || self.per_class == 0 {
            return bad("dim and per_class must be positive");
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction < 0.5) {
            return bad("hard_fraction must be in (0, 0.5)");
        }
        if self.hard_per_class() == 0 {
            return bad("hard_fraction * per_class rounds to zero hard samples");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if !(self.hard_offset >= 0.0 && self.hard_offset.is_finite()) {
            return bad("hard_offset must be non-negative");
        }
        Ok(())
    }

    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(LAYOUT_SEED);
        (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * self.separation / n).collect()
            })
            .collect()
    }
}

/// Draws `per_class` points per class: easy ones around the class centroid,
/// hard ones around the centroid shifted `hard_offset` toward the rival
/// class `(c + 1) mod K`. Unit-variance isotropic noise for both.
pub fn make_synthetic<T: Scalar>(p: &SyntheticParams) -> Result<SyntheticSet<T>> {
    p.validate()?;
    let centroids = p.centroids();
    let n_hard = p.hard_per_class();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut data = Vec::with_capacity(p.num_classes * p.per_class * p.dim);
    let mut labels = Vec::with_capacity(p.num_classes * p.per_class);
    let mut hard = Vec::with_capacity(p.num_classes * p.per_class);
    for (c, mu) in centroids.iter().enumerate() {
        let rival = &centroids[(c + 1) % p.num_classes];
        let dir: Vec<f64> = rival.iter().zip(mu).map(|(r, m)| r - m).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let hard_center: Vec<f64> = if len > 0.0 {
            mu.iter().zip(&dir).map(|(m, d)| m + p.hard_offset * d / len).collect()
        } else {
            mu.clone()
        };
        for i in 0..p.per_class {
            let is_hard = i >= p.per_class - n_hard;
            let center = if is_hard { &hard_center } else { mu };
            for &m in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(T::lit(m + z));
            }
            labels.push(c);
            hard.push(is_hard);
        }
    }
    let n = labels.len();
    let inputs = Tensor::from_vec(&[n, p.dim], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(SyntheticSet {
        data: LabeledData::new(inputs, labels, p.num_classes)?,
        hard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SyntheticParams {
        SyntheticParams {
            num_classes: 4,
            per_class: 100,
            hard_fraction: 0.2,
            dim: 6,
            separation: 4.0,
            hard_offset: 3.0,
            seed: 11,
        }
    }

    #[test]
    fn exact_hard_counts() {
        let s = make_synthetic::<f64>(&params()).unwrap();
        for c in 0..4 {
            let n = s
                .data
                .labels()
                .iter()
                .zip(&s.hard)
                .filter(|(&y, &h)| y == c && h)
                .count();
            assert_eq!(n, 20);
        }
        assert_eq!(s.data.len(), 400);
        assert_eq!(s.data.sample_shape(), &[6]);
    }

    #[test]
    fn deterministic_by_seed() {
        let a = make_synthetic::<f64>(&params()).unwrap();
        let b = make_synthetic::<f64>(&params()).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic::<f64>(&SyntheticParams { seed: 12, ..params() }).unwrap();
        assert_ne!(a, c);
        assert_eq!(
            params().centroids(),
            SyntheticParams { seed: 12, ..params() }.centroids()
        );
    }

    fn means(s: &SyntheticSet<f64>, class: usize, hard: bool) -> Vec<f64> {
        let d = 6;
        let rows: Vec<usize> = (0..s.data.len())
            .filter(|&i| s.data.labels()[i] == class && s.hard[i] == hard)
            .collect();
        let x = s.data.inputs().data();
        (0..d)
            .map(|j| rows.iter().map(|&i| x[i * d + j]).sum::<f64>() / rows.len() as f64)
            .collect()
    }

    #[test]
    fn hard_cluster_moves_toward_rival() {
        let p = SyntheticParams {
            per_class: 2000,
            ..params()
        };
        let s = make_synthetic::<f64>(&p).unwrap();
        let cents = p.centroids();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let easy = means(&s, 0, false);
        let hard = means(&s, 0, true);
        assert!(dist(&easy, &cents[0]) < 0.2);
        assert!((dist(&hard, &cents[0]) - 3.0).abs() < 0.4);
        assert!(dist(&hard, &cents[1]) < dist(&easy, &cents[1]));

        // zero offset: both partitions share one distribution
        let s = make_synthetic::<f64>(&SyntheticParams { hard_offset: 0.0, ..p }).unwrap();
        assert!(dist(&means(&s, 2, false), &means(&s, 2, true)) < 0.4);
    }

    #[test]
    fn rejects_degenerate_parameters() {
        for bad in [
            SyntheticParams {
                hard_fraction: 0.0,
                ..params()
            },
            SyntheticParams {
                hard_fraction: 0.5,
                ..params()
            },
            SyntheticParams {
                num_classes: 1,
                ..params()
            },
            SyntheticParams { dim: 0, ..params() },
            SyntheticParams {
                per_class: 2,
                hard_fraction: 0.1,
                ..params()
            },
            SyntheticParams {
                separation: 0.0,
                ..params()
            },
            SyntheticParams {
                hard_offset: -1.0,
                ..params()
            },
        ] {
            assert!(make_synthetic::<f64>(&bad).is_err(), "{bad:?}");
        }
    }
}
