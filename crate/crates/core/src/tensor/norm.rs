use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and fold them into the running
    /// estimates with the given momentum.
    Train { momentum: f64 },
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Per-channel batch statistics over every axis except the channel axis.
pub(crate) struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

pub(crate) fn channel_layout<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape(op, format!("need [n, c, ...], got {:?}", x.shape())));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((x.shape()[0], x.shape()[1], inner))
}

pub(crate) fn batch_moments<T: Scalar>(x: &Tensor<T>) -> Result<BatchMoments<T>> {
    let (n, c, inner) = channel_layout(x, "batch_norm3d")?;
    let count = n * inner;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * inner;
            s += x.data()[base..base + inner].iter().copied().sum::<T>();
        }
        let m = s / T::from_usize_lossy(count);
        let mut ss = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for &v in &x.data()[base..base + inner] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / T::from_usize_lossy(count);
    }
    Ok(BatchMoments { mean, var, count })
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub(crate) fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<Tensor<T>> {
    let (n, c, inner) = channel_layout(x, "batch_norm3d")?;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let (m, s, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for v in &mut out.data_mut()[base..base + inner] {
                *v = g * (*v - m) * s + bt;
            }
        }
    }
    Ok(out)
}

/// Running-estimate update after one training batch.
pub(crate) fn update_running<T: Scalar>(stats: &mut RunningStats<T>, moments: &BatchMoments<T>, momentum: f64) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    // unbiased variance for the running estimate
    let bessel = T::from_usize_lossy(moments.count) / T::from_usize_lossy(moments.count - 1);
    for ch in 0..stats.mean.len() {
        stats.mean[ch] = keep * stats.mean[ch] + m * moments.mean[ch];
        stats.var[ch] = keep * stats.var[ch] + m * moments.var[ch] * bessel;
    }
}

fn check_params<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>, stats: &RunningStats<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(
            "batch_norm3d",
            format!(
                "{c} channels but gamma {:?}, beta {:?}, stats {}",
                gamma.shape(),
                beta.shape(),
                stats.mean.len()
            ),
        ));
    }
    Ok(())
}

/// Batch normalization over `[n, c, ...]`, reducing every axis but `c`.
pub fn batch_norm3d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: BatchNormMode,
    eps: f64,
) -> Result<Tensor<T>> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("batch norm eps must be > 0, got {eps}")));
    }
    let (_, c, _) = channel_layout(x, "batch_norm3d")?;
    check_params(c, gamma, beta, stats)?;
    let eps_t = T::lit(eps);
    match mode {
        BatchNormMode::Train { momentum } => {
            let moments = batch_moments(x)?;
            if moments.count < 2 {
                return Err(Error::DegenerateVariance("batch_norm3d"));
            }
            let inv_std: Vec<T> = moments.var.iter().map(|&v| (v + eps_t).sqrt().recip()).collect();
            let y = normalize(x, &moments.mean, &inv_std, gamma.data(), beta.data())?;
            update_running(stats, &moments, momentum);
            Ok(y)
        }
        BatchNormMode::Eval => {
            let inv_std: Vec<T> = stats.var.iter().map(|&v| (v + eps_t).sqrt().recip()).collect();
            normalize(x, &stats.mean, &inv_std, gamma.data(), beta.data())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2, 2], |i| ((i / 8) % 3) as f64 * 4.0 - 1.0);
        let mut stats = RunningStats::new(3);
        let y = batch_norm3d(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &mut stats,
            BatchNormMode::Train { momentum: 0.1 },
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[2, 3, 2, 2, 2], -2.0, 2.0, &mut rng);
        let mut stats = RunningStats::new(3);
        let y = batch_norm3d(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &mut stats,
            BatchNormMode::Eval,
            1e-12,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn matches_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, c, s) = (3, 2, 4 * 3 * 2);
        let x = Tensor::<f64>::uniform(&[n, c, 4, 3, 2], -3.0, 5.0, &mut rng);
        let gamma = Tensor::<f64>::uniform(&[c], 0.5, 1.5, &mut rng);
        let beta = Tensor::<f64>::uniform(&[c], -1.0, 1.0, &mut rng);
        let mut stats = RunningStats::new(c);
        stats.mean = vec![0.3, -0.2];
        stats.var = vec![1.5, 0.7];
        let before = stats.clone();
        let eps = 1e-5;
        let y = batch_norm3d(&x, &gamma, &beta, &mut stats, BatchNormMode::Train { momentum: 0.1 }, eps).unwrap();

        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| x.data()[(b * c + ch) * s..(b * c + ch + 1) * s].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|u| (u - m).powi(2)).sum::<f64>() / vals.len() as f64;
            let v_unbiased = v * vals.len() as f64 / (vals.len() - 1) as f64;
            for b in 0..n {
                for k in 0..s {
                    let idx = (b * c + ch) * s + k;
                    let want = gamma.data()[ch] * (x.data()[idx] - m) / (v + eps).sqrt() + beta.data()[ch];
                    assert!((y.data()[idx] - want).abs() <= 1e-10);
                }
            }
            assert!((stats.mean[ch] - (0.9 * before.mean[ch] + 0.1 * m)).abs() <= 1e-10);
            assert!((stats.var[ch] - (0.9 * before.var[ch] + 0.1 * v_unbiased)).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_element_per_channel_is_rejected_in_train_mode() {
        let x = Tensor::<f64>::ones(&[1, 2, 1, 1, 1]);
        let mut stats = RunningStats::new(2);
        let err = batch_norm3d(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &mut stats,
            BatchNormMode::Train { momentum: 0.1 },
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance(_)));
        assert!(batch_norm3d(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), &mut stats, BatchNormMode::Eval, 1e-5).is_ok());
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::ones(&[2, 1, 2]);
        let mut stats = RunningStats::new(1);
        assert!(batch_norm3d(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), &mut stats, BatchNormMode::Eval, 0.0).is_err());
    }
}
