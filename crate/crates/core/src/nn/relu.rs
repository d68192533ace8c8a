use crate::tensor::Tensor;

/// ReLU with a cached sign mask for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut y = x.clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let y = self.cache.take().expect("relu backward without cached forward");
        let mut dx = dy.clone();
        for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        dx
    }
}
