//! 3D-Adapter bottleneck: grouped-depthwise 3D conv down-projection, ReLU,
//! pointwise 3D conv up-projection, per-channel scaling, residual skip.
//!
//! ```text
//! h_out = alpha (.) up( relu( down(h_in) ) ) + h_in
//! ```
//!
//! The down conv has weight shape (C/lambda, lambda, K, K, K) — C/lambda
//! groups, each mixing lambda input channels into one bottleneck channel —
//! and the up conv is 1x1x1 back to C channels. No biases anywhere; alpha
//! starts at ones. With `Identity` init the up weights are zero, so the whole
//! layer is an exact identity map until training moves it.

use crate::error::{Error, Result};
use crate::nn::{Conv3d, Param, ParamKind, Relu};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;
use crate::util::{derive_seed, fnv1a};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// Small symmetric uniform weights (+-1/sqrt(fan_in)) in both projections.
    Random,
    /// Zeroed up-projection: the adapter computes the identity map.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Bottleneck compression factor; the hidden width is c_in / lambda.
    pub lambda: usize,
    /// Cubic kernel extent of the down conv; odd so padding preserves D, H, W.
    pub kernel: usize,
    pub init: AdapterInit,
}

impl AdapterConfig {
    pub fn new(channels: usize, lambda: usize) -> Self {
        AdapterConfig { c_in: channels, c_out: channels, lambda, kernel: 3, init: AdapterInit::Random }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.lambda == 0 {
            return Err(Error::config("adapter channels and lambda must be positive"));
        }
        if self.c_in != self.c_out {
            return Err(Error::config(format!(
                "adapter requires c_in == c_out for the residual skip, got {} and {}",
                self.c_in, self.c_out
            )));
        }
        if self.c_in % self.lambda != 0 {
            return Err(Error::config(format!(
                "adapter c_in {} not divisible by lambda {}",
                self.c_in, self.lambda
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "adapter kernel {} must be odd to preserve extents",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn hidden_ch(&self) -> usize {
        self.c_in / self.lambda
    }
}

/// Exact trainable-element count: down C_in*K^3, up C_out*(C_in/lambda),
/// alpha C_out.
pub fn count_adapter_params(config: &AdapterConfig) -> Result<usize> {
    config.validate()?;
    let k3 = config.kernel.pow(3);
    Ok(config.c_in * k3 + config.c_out * config.hidden_ch() + config.c_out)
}

#[derive(Debug, Clone)]
pub struct Adapter3D {
    pub theta_down: Conv3d,
    pub theta_up: Conv3d,
    pub alpha: Param,
    pub config: AdapterConfig,
    relu: Relu,
    /// Up-projection output cached in training forward for the alpha gradient.
    cache_up_out: Option<Tensor>,
}

pub fn build_adapter(config: &AdapterConfig, seed: u64) -> Result<Adapter3D> {
    Adapter3D::build("adapter", config, seed)
}

impl Adapter3D {
    pub fn build(name_prefix: &str, config: &AdapterConfig, seed: u64) -> Result<Adapter3D> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a(name_prefix.as_bytes())]));
        let k = config.kernel;
        let pad = (k - 1) / 2;
        let hidden = config.hidden_ch();
        let theta_down = Conv3d::new(
            format!("{name_prefix}.down.weight"),
            ParamKind::Adapter,
            config.c_in,
            hidden,
            hidden, // one group per bottleneck channel, each eats lambda inputs
            (k, k, k),
            (1, 1, 1),
            (pad, pad, pad),
            &mut rng,
        );
        let mut theta_up = Conv3d::new(
            format!("{name_prefix}.up.weight"),
            ParamKind::Adapter,
            hidden,
            config.c_out,
            1,
            (1, 1, 1),
            (1, 1, 1),
            (0, 0, 0),
            &mut rng,
        );
        if config.init == AdapterInit::Identity {
            theta_up.weight.value.fill(0.0);
        }
        let alpha = Param::new(
            format!("{name_prefix}.alpha"),
            ParamKind::Adapter,
            Tensor::full(&[config.c_out], 1.0),
        );
        Ok(Adapter3D {
            theta_down,
            theta_up,
            alpha,
            config: *config,
            relu: Relu::new(),
            cache_up_out: None,
        })
    }

    fn check_input(&self, h_in: &Tensor) -> Result<()> {
        let (_, c, _, _, _) = h_in.dims5()?;
        if c != self.config.c_in {
            return Err(Error::shape(format!(
                "adapter expects {} channels, input has {c}",
                self.config.c_in
            )));
        }
        h_in.ensure_finite("adapter input")
    }

    /// Pure evaluation forward; safe to call concurrently on a shared adapter.
    pub fn apply(&self, h_in: &Tensor) -> Result<Tensor> {
        self.check_input(h_in)?;
        let down_g = self.theta_down.geom_for(h_in);
        let (od, oh, ow) = down_g.out_dhw();
        let mut a = Tensor::zeros(&[down_g.batch, down_g.out_ch, od, oh, ow]);
        ops::conv3d_forward(h_in.data(), self.theta_down.weight.value.data(), &down_g, a.data_mut());
        for v in a.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let up_g = self.theta_up.geom_for(&a);
        let mut out = h_in.clone();
        scale_add_pointwise(&a, &self.theta_up.weight.value, &self.alpha.value, &up_g, &mut out);
        Ok(out)
    }

    /// Training forward: caches activations for [`Adapter3D::backward`].
    pub fn forward_train(&mut self, h_in: &Tensor) -> Result<Tensor> {
        self.check_input(h_in)?;
        let a = self.theta_down.forward(h_in, true);
        let a = self.relu.forward(&a, true);
        let u = self.theta_up.forward(&a, true);
        let mut y = h_in.clone();
        let (n, c, d, h, w) = u.dims5()?;
        let plane = d * h * w;
        for ni in 0..n {
            for ci in 0..c {
                let al = self.alpha.value.data()[ci];
                let base = (ni * c + ci) * plane;
                for j in base..base + plane {
                    y.data_mut()[j] += al * u.data()[j];
                }
            }
        }
        self.cache_up_out = Some(u);
        Ok(y)
    }

    /// dL/dh_in given dL/dh_out; accumulates parameter gradients for every
    /// trainable weight in the bottleneck.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let u = self.cache_up_out.take().expect("adapter backward without cached forward");
        let (n, c, d, h, w) = u.dims5().unwrap();
        let plane = d * h * w;

        if self.alpha.trainable {
            let mut dalpha = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let mut acc = 0.0;
                    for j in base..base + plane {
                        acc += dy.data()[j] * u.data()[j];
                    }
                    dalpha[ci] += acc;
                }
            }
            self.alpha.accumulate_grad(Tensor::from_vec(&[c], dalpha));
        }

        // du = dy (.) alpha, broadcast over channels
        let mut du = dy.clone();
        for ni in 0..n {
            for ci in 0..c {
                let al = self.alpha.value.data()[ci];
                let base = (ni * c + ci) * plane;
                for v in &mut du.data_mut()[base..base + plane] {
                    *v *= al;
                }
            }
        }

        let da = self.theta_up.backward(&du);
        let da = self.relu.backward(&da);
        let mut dx = self.theta_down.backward(&da);
        dx.add_assign(dy); // residual skip
        dx
    }

    /// All three parameter tensors, in registry order.
    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.theta_down.weight);
        f(&mut self.theta_up.weight);
        f(&mut self.alpha);
    }

    pub fn param_count(&self) -> usize {
        self.theta_down.weight.value.numel() + self.theta_up.weight.value.numel() + self.alpha.value.numel()
    }
}

/// out += alpha (.) conv1x1(a) fused, reusing the grouped-conv kernel for the
/// pointwise product would double-buffer; this small loop stays cache-local.
fn scale_add_pointwise(a: &Tensor, w_up: &Tensor, alpha: &Tensor, g: &ConvGeom, out: &mut Tensor) {
    let (n, hidden, d, h, w) = a.dims5().unwrap();
    debug_assert_eq!(g.out_ch, alpha.numel());
    let plane = d * h * w;
    let c_out = g.out_ch;
    for ni in 0..n {
        for co in 0..c_out {
            let al = alpha.data()[co];
            if al == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[(ni * c_out + co) * plane..][..plane];
            for hc in 0..hidden {
                let wv = w_up.data()[co * hidden + hc];
                if wv == 0.0 {
                    continue;
                }
                let arow = &a.data()[(ni * hidden + hc) * plane..][..plane];
                let f = al * wv;
                for (o, av) in orow.iter_mut().zip(arow) {
                    *o += f * av;
                }
            }
        }
    }
}
