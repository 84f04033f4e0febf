//! Parameterized building blocks shared by the network modules.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Conv3dSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Scale of the truncated-normal initializer relative to `1/sqrt(fan_in)`.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Layers followed by a rectifier.
    Relu,
    Linear,
    Zero,
}

/// Normal samples rejected outside two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, init: Init) -> Tensor {
    let std = match init {
        Init::Relu => (2.0 / fan_in as f64).sqrt(),
        Init::Linear => (1.0 / fan_in as f64).sqrt(),
        Init::Zero => return Tensor::zeros(shape),
    };
    truncated_normal(rng, shape, std)
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(rng, &[in_dim, out_dim], in_dim, init),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 3D convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: Conv3dSpec,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = spec.patch_len();
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(rng, &[k, spec.out_channels], k, init),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv3d(x, w, b, self.spec)
    }
}

/// Two-layer rectified MLP with hidden width `hidden`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, bias, Init::Relu, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, out, bias, Init::Linear, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}
