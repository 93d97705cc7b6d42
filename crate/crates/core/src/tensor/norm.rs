use super::{Result, TensorError};
use crate::Scalar;

/// Exponential-average factor applied to the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BnMode<'a, T> {
    /// Batch statistics; running stats are updated in place.
    Train(&'a mut RunningStats<T>),
    Eval(&'a RunningStats<T>),
}

pub(crate) struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

fn channel_iter(shape: &[usize], c: usize) -> impl Iterator<Item = usize> + '_ {
    let (n, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    (0..n).flat_map(move |i| {
        let base = (i * ch + c) * hw;
        base..base + hw
    })
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    scale: &[T],
    shift: &[T],
    eps: T,
    mode: BnMode<'_, T>,
) -> Result<(Vec<T>, BnCache<T>)> {
    let channels = shape[1];
    let count = shape[0] * shape[2] * shape[3];
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    let train = matches!(mode, BnMode::Train(_));
    if train && count < 2 {
        return Err(TensorError::BatchTooSmall(count));
    }
    let momentum = T::lit(BN_MOMENTUM);
    let stats_update = match mode {
        BnMode::Train(stats) => {
            if stats.mean.len() != channels {
                return Err(TensorError::Invalid(format!(
                    "batch_norm2d: running stats have {} channels, input has {channels}",
                    stats.mean.len()
                )));
            }
            Some(stats)
        }
        BnMode::Eval(stats) => {
            if stats.mean.len() != channels {
                return Err(TensorError::Invalid(format!(
                    "batch_norm2d: running stats have {} channels, input has {channels}",
                    stats.mean.len()
                )));
            }
            for c in 0..channels {
                inv_std[c] = T::one() / (stats.var[c] + eps).sqrt();
                for i in channel_iter(shape, c) {
                    xhat[i] = (x[i] - stats.mean[c]) * inv_std[c];
                    out[i] = scale[c] * xhat[i] + shift[c];
                }
            }
            None
        }
    };
    if let Some(stats) = stats_update {
        let m = T::from_count(count);
        for c in 0..channels {
            let mean = channel_iter(shape, c).map(|i| x[i]).sum::<T>() / m;
            let var = channel_iter(shape, c).map(|i| (x[i] - mean) * (x[i] - mean)).sum::<T>() / m;
            inv_std[c] = T::one() / (var + eps).sqrt();
            for i in channel_iter(shape, c) {
                xhat[i] = (x[i] - mean) * inv_std[c];
                out[i] = scale[c] * xhat[i] + shift[c];
            }
            let unbiased = var * m / (m - T::one());
            stats.mean[c] = (T::one() - momentum) * stats.mean[c] + momentum * mean;
            stats.var[c] = (T::one() - momentum) * stats.var[c] + momentum * unbiased;
        }
    }
    Ok((out, BnCache { xhat, inv_std, train }))
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    g: &[T],
    shape: &[usize],
    scale: &[T],
    cache: &BnCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = shape[1];
    let count = shape[0] * shape[2] * shape[3];
    let m = T::from_count(count);
    let mut gx = vec![T::zero(); g.len()];
    let mut gscale = vec![T::zero(); channels];
    let mut gshift = vec![T::zero(); channels];
    for c in 0..channels {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in channel_iter(shape, c) {
            sum_g += g[i];
            sum_gx += g[i] * cache.xhat[i];
        }
        gscale[c] = sum_gx;
        gshift[c] = sum_g;
        let k = scale[c] * cache.inv_std[c];
        if cache.train {
            for i in channel_iter(shape, c) {
                gx[i] = k * (g[i] - sum_g / m - cache.xhat[i] * sum_gx / m);
            }
        } else {
            for i in channel_iter(shape, c) {
                gx[i] = k * g[i];
            }
        }
    }
    (gx, gscale, gshift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Fill, Graph, Tensor};

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::new(&[c], Fill::Constant(1.0)).unwrap()
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::new(
            &[4, 3, 3, 2],
            Fill::Uniform {
                lo: -3.0,
                hi: 5.0,
                seed: 3,
            },
        )
        .unwrap();
        let mut stats = RunningStats::new(3);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let s = g.constant(ones(3)).unwrap();
        let b = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let y = g.batch_norm2d(xv, s, b, 1e-12, BnMode::Train(&mut stats)).unwrap();
        let shape = g.shape(y).to_vec();
        let out = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = channel_iter(&shape, c).map(|i| out[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        // running stats moved from (0, 1) toward the batch stats
        assert!(stats.mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn constant_channel_gives_zeros() {
        let x = Tensor::new(&[2, 1, 2, 2], Fill::Constant(4.2)).unwrap();
        let mut stats = RunningStats::new(1);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let s = g.constant(ones(1)).unwrap();
        let b = g.constant(Tensor::zeros(&[1]).unwrap()).unwrap();
        let y = g.batch_norm2d(xv, s, b, 1e-5, BnMode::Train(&mut stats)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_momentum_update() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut stats = RunningStats::new(1);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let s = g.constant(ones(1)).unwrap();
        let b = g.constant(Tensor::zeros(&[1]).unwrap()).unwrap();
        g.batch_norm2d(xv, s, b, 1e-5, BnMode::Train(&mut stats)).unwrap();
        // batch mean 2, unbiased variance 2
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-15);

        let y = g.batch_norm2d(xv, s, b, 0.0, BnMode::Eval(&stats)).unwrap();
        let expect = (1.0 - 0.2) / 1.1f64.sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn train_mode_needs_two_values() {
        let mut stats = RunningStats::new(1);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let s = g.constant(ones(1)).unwrap();
        let b = g.constant(Tensor::zeros(&[1]).unwrap()).unwrap();
        assert_eq!(
            g.batch_norm2d(xv, s, b, 1e-5, BnMode::Train(&mut stats)).unwrap_err(),
            TensorError::BatchTooSmall(1)
        );
    }

    #[test]
    fn gradcheck_train_and_eval() {
        let x = Tensor::new(
            &[2, 3, 2, 2],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 31,
            },
        )
        .unwrap();
        let scale = Tensor::new(
            &[3],
            Fill::Uniform {
                lo: 0.5,
                hi: 1.5,
                seed: 32,
            },
        )
        .unwrap();
        let shift = Tensor::new(
            &[3],
            Fill::Uniform {
                lo: -0.5,
                hi: 0.5,
                seed: 33,
            },
        )
        .unwrap();
        // A fixed random projection makes the loss sensitive to every output.
        let proj = Tensor::new(
            &[2, 3, 2, 2],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 34,
            },
        )
        .unwrap();
        let rep = grad_check(
            |g, v| {
                let mut stats = RunningStats::new(3);
                let y = g.batch_norm2d(v[0], v[1], v[2], 1e-5, BnMode::Train(&mut stats))?;
                let p = g.constant(proj.clone())?;
                let yp = g.mul(y, p)?;
                let y2 = g.mul(yp, yp)?;
                let t = g.add(y2, yp)?;
                g.sum(t)
            },
            &[x.clone(), scale.clone(), shift.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "train: {rep:?}");

        let stats = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        let rep = grad_check(
            |g, v| {
                let y = g.batch_norm2d(v[0], v[1], v[2], 1e-5, BnMode::Eval(&stats))?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            &[x, scale, shift],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "eval: {rep:?}");
    }
}
