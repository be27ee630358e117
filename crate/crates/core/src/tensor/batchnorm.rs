//! 2-D batch normalization over `[B,C,H,W]` composed from primitive ops,
//! so gradients flow through the batch statistics without a hand-written
//! rule. Running statistics are returned as an update for the caller to
//! apply; the forward itself never mutates shared state.

use super::{Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics for one batchnorm layer.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Momentum update toward freshly measured batch statistics. The first
    /// update adopts the batch statistics outright.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        if !self.initialized {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var);
            self.initialized = true;
            return;
        }
        for (m, b) in self.mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        for (v, b) in self.var.iter_mut().zip(batch_var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

/// Measured batch statistics produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalizes `x` per channel. Train mode uses batch statistics over
/// `(B,H,W)` (biased variance) and reports them back; eval mode uses the
/// stored running statistics and errors when they were never initialized.
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    mode: BnMode,
) -> Result<(Tensor, Option<BnBatchStats>)> {
    if x.rank() != 4 {
        return Err(TensorError::shape(
            "batchnorm2d",
            format!("expects rank-4 input, got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.rank() != 1 || t.shape()[0] != c {
            return Err(TensorError::shape(
                "batchnorm2d",
                format!("{name} shape {:?} does not match {c} channels", t.shape()),
            ));
        }
    }
    match mode {
        BnMode::Train => {
            let (y, mean, var) = x.batchnorm_train(gamma, beta, BN_EPS)?;
            Ok((y, Some(BnBatchStats { mean, var })))
        }
        BnMode::Eval => {
            if !stats.initialized {
                return Err(TensorError::shape(
                    "batchnorm2d",
                    "eval mode before any training step (running stats uninitialized)".to_string(),
                ));
            }
            let mu = Tensor::from_vec(&[c], stats.mean.clone())?;
            let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let inv_std = Tensor::from_vec(&[c], inv_std)?;
            let y = x
                .add_channel(&mu.mul_scalar(-1.0))?
                .mul_channel(&inv_std)?
                .mul_channel(gamma)?
                .add_channel(beta)?;
            Ok((y, None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::new(seed);
        let data = (0..super::super::numel(shape)).map(|_| rng.normal()).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn constant_input_yields_beta() {
        let x = Tensor::full(&[2, 3, 4, 4], 5.0);
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &BnStats::new(3), BnMode::Train).unwrap();
        for ch in 0..3 {
            for b in 0..2 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let v = y.at(&[b, ch, yy, xx]);
                        assert!((v - beta.data()[ch]).abs() < 1e-3, "ch {ch}: {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn train_mode_normalizes_to_unit_stats() {
        let x = rand_tensor(&[4, 2, 5, 5], 9);
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &BnStats::new(2), BnMode::Train).unwrap();
        let n = (4 * 5 * 5) as f64;
        for ch in 0..2 {
            let mut mean = 0.0;
            let mut sq = 0.0;
            for b in 0..4 {
                for yy in 0..5 {
                    for xx in 0..5 {
                        let v = y.at(&[b, ch, yy, xx]);
                        mean += v;
                        sq += v * v;
                    }
                }
            }
            mean /= n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn matches_reference_formula() {
        // direct-loop oracle of (x - mu)/sqrt(var + eps) * gamma + beta
        let x = rand_tensor(&[3, 2, 4, 4], 31);
        let gamma = Tensor::from_vec(&[2], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![-0.25, 0.75]).unwrap();
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &BnStats::new(2), BnMode::Train).unwrap();
        let n = (3 * 4 * 4) as f64;
        for ch in 0..2 {
            let mut mu = 0.0;
            for b in 0..3 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        mu += x.at(&[b, ch, yy, xx]);
                    }
                }
            }
            mu /= n;
            let mut var = 0.0;
            for b in 0..3 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let d = x.at(&[b, ch, yy, xx]) - mu;
                        var += d * d;
                    }
                }
            }
            var /= n;
            for b in 0..3 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let expect = (x.at(&[b, ch, yy, xx]) - mu) / (var + BN_EPS).sqrt()
                            * gamma.data()[ch]
                            + beta.data()[ch];
                        let got = y.at(&[b, ch, yy, xx]);
                        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn eval_before_train_errors() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let err = batchnorm2d(&x, &gamma, &beta, &BnStats::new(2), BnMode::Eval).unwrap_err();
        assert!(err.to_string().contains("uninitialized"));
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = rand_tensor(&[2, 1, 3, 3], 55);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        let mut stats = BnStats::new(1);
        stats.update(&[2.0], &[4.0]);
        let (y, upd) = batchnorm2d(&x, &gamma, &beta, &stats, BnMode::Eval).unwrap();
        assert!(upd.is_none());
        let expect = (x.data()[0] - 2.0) / (4.0 + BN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn running_stats_momentum() {
        let mut stats = BnStats::new(1);
        stats.update(&[1.0], &[2.0]);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![2.0]);
        stats.update(&[2.0], &[4.0]);
        assert!((stats.mean[0] - (0.9 * 1.0 + 0.1 * 2.0)).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 * 2.0 + 0.1 * 4.0)).abs() < 1e-12);
    }
}
