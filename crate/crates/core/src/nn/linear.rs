use super::{Param, ParamKind};
use crate::tensor::Tensor;
use rand::Rng;

/// Fully connected layer, (N, in) -> (N, out). Weight shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(name_prefix: &str, kind: ParamKind, in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_f as f64).sqrt();
        Linear {
            weight: Param::new(
                format!("{name_prefix}.weight"),
                kind,
                Tensor::rand_uniform(&[out_f, in_f], -bound, bound, rng),
            ),
            bias: Param::new(format!("{name_prefix}.bias"), kind, Tensor::zeros(&[out_f])),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, in_f) = x.dims2().expect("linear input must be 2-axis");
        assert_eq!(in_f, self.in_features(), "linear {} input width mismatch", self.weight.name);
        let out_f = self.out_features();
        let mut y = Tensor::zeros(&[n, out_f]);
        for ni in 0..n {
            let xr = &x.data()[ni * in_f..][..in_f];
            let yr = &mut y.data_mut()[ni * out_f..][..out_f];
            for (o, yo) in yr.iter_mut().enumerate() {
                let wr = &self.weight.value.data()[o * in_f..][..in_f];
                let mut acc = self.bias.value.data()[o];
                for (wv, xv) in wr.iter().zip(xr) {
                    acc += wv * xv;
                }
                *yo = acc;
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without cached forward");
        let (n, in_f) = x.dims2().unwrap();
        let out_f = self.out_features();
        debug_assert_eq!(dy.shape(), [n, out_f]);

        if self.weight.trainable {
            let mut dw = Tensor::zeros(&[out_f, in_f]);
            let mut db = Tensor::zeros(&[out_f]);
            for ni in 0..n {
                let xr = &x.data()[ni * in_f..][..in_f];
                let dyr = &dy.data()[ni * out_f..][..out_f];
                for (o, &g) in dyr.iter().enumerate() {
                    db.data_mut()[o] += g;
                    let dwr = &mut dw.data_mut()[o * in_f..][..in_f];
                    for (dwv, xv) in dwr.iter_mut().zip(xr) {
                        *dwv += g * xv;
                    }
                }
            }
            self.weight.accumulate_grad(dw);
            self.bias.accumulate_grad(db);
        }

        let mut dx = Tensor::zeros(&[n, in_f]);
        for ni in 0..n {
            let dyr = &dy.data()[ni * out_f..][..out_f];
            let dxr = &mut dx.data_mut()[ni * in_f..][..in_f];
            for (o, &g) in dyr.iter().enumerate() {
                let wr = &self.weight.value.data()[o * in_f..][..in_f];
                for (dxv, wv) in dxr.iter_mut().zip(wr) {
                    *dxv += g * wv;
                }
            }
        }
        dx
    }
}
