use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Fully connected layer, Xavier-uniform weights and zero bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = params.add(
            format!("{name}.w"),
            Tensor::new(vec![fan_in, fan_out], uniform(rng, fan_in * fan_out, bound)).unwrap(),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        g.dense(x, w, b)
    }
}

/// Dense layer whose weight is multiplied by a fixed 0/1 connectivity mask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskedDense {
    pub inner: Dense,
    /// `[fan_in, fan_out]`, row-major.
    pub mask: Vec<f64>,
}

impl MaskedDense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        mask: Vec<f64>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(mask.len(), fan_in * fan_out, "mask shape");
        Self {
            inner: Dense::new(params, name, fan_in, fan_out, rng),
            mask,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.inner.w);
        let m = g.constant(Tensor::new(
            vec![self.inner.fan_in, self.inner.fan_out],
            self.mask.clone(),
        )?);
        let wm = g.mul(w, m)?;
        let b = g.param(params, self.inner.b);
        g.dense(x, wm, b)
    }
}

/// Square-kernel valid convolution, Kaiming-uniform weights and zero bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let n = out_channels * fan_in;
        let w = params.add(
            format!("{name}.w"),
            Tensor::new(
                vec![out_channels, in_channels, kernel, kernel],
                uniform(rng, n, (6.0 / fan_in as f64).sqrt()),
            )
            .unwrap(),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![out_channels]));
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        g.conv2d(x, w, b, self.stride)
    }
}
