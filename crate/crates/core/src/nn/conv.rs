use super::{Param, ParamKind};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;
use rand::Rng;

/// Grouped 3D convolution without bias. Weight shape
/// (out_ch, in_ch/groups, kd, kh, kw).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    cache: Option<(Tensor, ConvGeom)>,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        kind: ParamKind,
        in_ch: usize,
        out_ch: usize,
        groups: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_ch % groups == 0 && out_ch % groups == 0, "channels not divisible by groups");
        let shape = [out_ch, in_ch / groups, kernel.0, kernel.1, kernel.2];
        // uniform +-sqrt(1/fan_in), fan_in = channels-per-group * kernel volume
        let fan_in = (in_ch / groups) * kernel.0 * kernel.1 * kernel.2;
        let bound = (1.0 / fan_in as f64).sqrt();
        let value = Tensor::rand_uniform(&shape, -bound, bound, rng);
        Conv3d {
            weight: Param::new(name, kind, value),
            in_ch,
            out_ch,
            groups,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn geom_for(&self, x: &Tensor) -> ConvGeom {
        let (n, c, d, h, w) = x.dims5().expect("conv input must be 5-axis");
        assert_eq!(c, self.in_ch, "conv {} expects {} input channels, got {c}", self.weight.name, self.in_ch);
        ConvGeom {
            batch: n,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            groups: self.groups,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            in_dhw: (d, h, w),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let g = self.geom_for(x);
        let (od, oh, ow) = g.out_dhw();
        let mut out = Tensor::zeros(&[g.batch, g.out_ch, od, oh, ow]);
        ops::conv3d_forward(x.data(), self.weight.value.data(), &g, out.data_mut());
        if train {
            self.cache = Some((x.clone(), g));
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (x, g) = self.cache.take().expect("conv backward without cached forward");
        if self.weight.trainable {
            let mut dw = Tensor::zeros(self.weight.value.shape());
            ops::conv3d_weight_grad(x.data(), dy.data(), &g, dw.data_mut());
            self.weight.accumulate_grad(dw);
        }
        let mut dx = Tensor::zeros(x.shape());
        ops::conv3d_input_grad(dy.data(), self.weight.value.data(), &g, dx.data_mut());
        dx
    }
}
