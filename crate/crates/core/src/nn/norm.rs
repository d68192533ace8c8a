use super::{Buffer, Param, ParamKind};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    invstd: Vec<f64>,
    used_batch_stats: bool,
}

/// Per-channel batch normalization over (N, D, H, W).
///
/// `use_batch_stats` controls training behaviour: when false the layer
/// normalizes with its frozen running statistics even during training and
/// never updates them. Freeze policies flip this off whenever the backbone
/// is frozen, so a continually-adapted model sees exactly the statistics the
/// general pretraining produced.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub use_batch_stats: bool,
    cache: Option<BnCache>,
}

impl BatchNorm3d {
    pub fn new(name_prefix: &str, ch: usize) -> Self {
        BatchNorm3d {
            gamma: Param::new(format!("{name_prefix}.gamma"), ParamKind::BnAffine, Tensor::full(&[ch], 1.0)),
            beta: Param::new(format!("{name_prefix}.beta"), ParamKind::BnAffine, Tensor::zeros(&[ch])),
            running_mean: Buffer::new(format!("{name_prefix}.running_mean"), Tensor::zeros(&[ch])),
            running_var: Buffer::new(format!("{name_prefix}.running_var"), Tensor::full(&[ch], 1.0)),
            use_batch_stats: true,
            cache: None,
        }
    }

    pub fn ch(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, d, h, w) = x.dims5().expect("bn input must be 5-axis");
        assert_eq!(c, self.ch(), "bn {} channel mismatch", self.gamma.name);
        let plane = d * h * w;
        let per_ch = n * plane;
        let use_batch = train && self.use_batch_stats;

        let (mean, var): (Vec<f64>, Vec<f64>) = if use_batch {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    s += x.data()[base..base + plane].iter().sum::<f64>();
                }
                mean[ci] = s / per_ch as f64;
                let mut sq = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &x.data()[base..base + plane] {
                        let dvi = v - mean[ci];
                        sq += dvi * dvi;
                    }
                }
                var[ci] = sq / per_ch as f64; // biased, used for normalization
            }
            // running stats track the unbiased estimate
            let unbias = per_ch as f64 / (per_ch as f64 - 1.0).max(1.0);
            for ci in 0..c {
                let rm = &mut self.running_mean.value.data_mut()[ci];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ci];
                let rv = &mut self.running_var.value.data_mut()[ci];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.value.data().to_vec(), self.running_var.value.data().to_vec())
        };

        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (g, b) = (self.gamma.value.data()[ci], self.beta.value.data()[ci]);
                let (m, s) = (mean[ci], invstd[ci]);
                for j in base..base + plane {
                    let xh = (x.data()[j] - m) * s;
                    xhat.data_mut()[j] = xh;
                    y.data_mut()[j] = g * xh + b;
                }
            }
        }
        if train {
            self.cache = Some(BnCache { xhat, invstd, used_batch_stats: use_batch });
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { xhat, invstd, used_batch_stats } =
            self.cache.take().expect("bn backward without cached forward");
        let (n, c, d, h, w) = dy.dims5().expect("bn grad must be 5-axis");
        let plane = d * h * w;
        let per_ch = (n * plane) as f64;

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for j in base..base + plane {
                    dgamma[ci] += dy.data()[j] * xhat.data()[j];
                    dbeta[ci] += dy.data()[j];
                }
            }
        }

        let mut dx = Tensor::zeros(dy.shape());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let g = self.gamma.value.data()[ci];
                let s = invstd[ci];
                if used_batch_stats {
                    // dx = g*s/N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
                    let (sd, sdx) = (dbeta[ci], dgamma[ci]);
                    for j in base..base + plane {
                        dx.data_mut()[j] =
                            g * s / per_ch * (per_ch * dy.data()[j] - sd - xhat.data()[j] * sdx);
                    }
                } else {
                    // frozen statistics are constants: straight-through scale
                    for j in base..base + plane {
                        dx.data_mut()[j] = g * s * dy.data()[j];
                    }
                }
            }
        }

        if self.gamma.trainable {
            self.gamma.accumulate_grad(Tensor::from_vec(&[c], dgamma));
        }
        if self.beta.trainable {
            self.beta.accumulate_grad(Tensor::from_vec(&[c], dbeta));
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_forward_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm3d::new("bn", 3);
        let x = Tensor::rand_uniform(&[2, 3, 2, 3, 3], -2.0, 5.0, &mut rng);
        let y = bn.forward(&x, true);
        let plane = 2 * 3 * 3;
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                let base = (ni * 3 + ci) * plane;
                vals.extend_from_slice(&y.data()[base..base + plane]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps shrinks variance slightly
        }
    }

    #[test]
    fn frozen_stats_mode_leaves_running_stats_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bn = BatchNorm3d::new("bn", 2);
        bn.use_batch_stats = false;
        let before_m = bn.running_mean.value.clone();
        let before_v = bn.running_var.value.clone();
        let x = Tensor::rand_uniform(&[2, 2, 2, 2, 2], -1.0, 1.0, &mut rng);
        let _ = bn.forward(&x, true);
        assert_eq!(bn.running_mean.value, before_m);
        assert_eq!(bn.running_var.value, before_v);
    }

    #[test]
    fn batch_stats_mode_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bn = BatchNorm3d::new("bn", 2);
        let x = Tensor::rand_uniform(&[2, 2, 2, 2, 2], 1.0, 3.0, &mut rng);
        let _ = bn.forward(&x, true);
        // mean moved toward the batch mean (~2), variance away from 1
        assert!(bn.running_mean.value.data().iter().all(|&m| m > 0.05));
    }
}
