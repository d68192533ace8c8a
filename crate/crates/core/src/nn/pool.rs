use crate::ops::{self, PoolGeom};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MaxPool3d {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    cache: Option<(PoolGeom, Vec<usize>)>,
}

impl MaxPool3d {
    pub fn new(kernel: (usize, usize, usize), stride: (usize, usize, usize), pad: (usize, usize, usize)) -> Self {
        MaxPool3d { kernel, stride, pad, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, d, h, w) = x.dims5().expect("pool input must be 5-axis");
        let g = PoolGeom {
            batch: n,
            ch: c,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            in_dhw: (d, h, w),
        };
        let (od, oh, ow) = g.out_dhw();
        assert!(od > 0 && oh > 0 && ow > 0, "pool input {:?} collapsed to zero extent", x.shape());
        let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
        let mut argmax = vec![0usize; out.numel()];
        ops::maxpool3d_forward(x.data(), &g, out.data_mut(), &mut argmax);
        if train {
            self.cache = Some((g, argmax));
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (g, argmax) = self.cache.take().expect("pool backward without cached forward");
        let (d, h, w) = g.in_dhw;
        let mut dx = Tensor::zeros(&[g.batch, g.ch, d, h, w]);
        ops::maxpool3d_backward(dy.data(), &argmax, &g, dx.data_mut());
        dx
    }
}

/// Collapse (N, C, D, H, W) to (N, C) by averaging.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<(usize, usize, usize)>, // batch, ch, plane
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, d, h, w) = x.dims5().expect("gap input must be 5-axis");
        let plane = d * h * w;
        let mut out = Tensor::zeros(&[n, c]);
        ops::global_avg_pool(x.data(), n, c, plane, out.data_mut());
        if train {
            self.cache = Some((n, c, plane));
        }
        out
    }

    /// Backward needs the original spatial extents to re-broadcast.
    pub fn backward(&mut self, dy: &Tensor, dhw: (usize, usize, usize)) -> Tensor {
        let (n, c, plane) = self.cache.take().expect("gap backward without cached forward");
        debug_assert_eq!(plane, dhw.0 * dhw.1 * dhw.2);
        let mut dx = Tensor::zeros(&[n, c, dhw.0, dhw.1, dhw.2]);
        ops::global_avg_pool_backward(dy.data(), n, c, plane, dx.data_mut());
        dx
    }
}
