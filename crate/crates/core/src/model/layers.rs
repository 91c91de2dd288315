//! Minimal conv / linear layers whose parameters live in a [`VarStore`] and
//! are initialized from a caller-supplied RNG, so construction does not
//! depend on libtorch's global generator.

use rand::Rng;
use tch::nn::Path;
use tch::{Kind, Tensor};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn leaky_relu(x: &Tensor) -> Tensor {
    x.maximum(&(x * LEAKY_SLOPE))
}

fn uniform(rng: &mut impl Rng, dims: &[i64], bound: f64) -> Tensor {
    let n: i64 = dims.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::from_slice(&data).reshape(dims)
}

/// He-uniform bound for LeakyReLU(0.2) fan-in.
fn he_bound(fan_in: i64) -> f64 {
    (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

#[derive(Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: i64,
    pub padding: i64,
}

impl Conv {
    pub(crate) fn new(
        p: &Path,
        name: &str,
        c_in: i64,
        c_out: i64,
        kernel: i64,
        stride: i64,
        padding: i64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let p = p / name;
        let kind = p.kind();
        let weight = p.add(
            "weight",
            uniform(rng, &[c_out, c_in, kernel, kernel], he_bound(fan_in)).to_kind(kind),
            true,
        );
        let bias = p.add(
            "bias",
            uniform(rng, &[c_out], 1.0 / (fan_in as f64).sqrt()).to_kind(kind),
            true,
        );
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(
            &self.weight,
            Some(&self.bias),
            [self.stride, self.stride],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn new(p: &Path, name: &str, d_in: i64, d_out: i64, rng: &mut impl Rng) -> Self {
        let p = p / name;
        let kind = p.kind();
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = p.add(
            "weight",
            uniform(rng, &[d_out, d_in], bound).to_kind(kind),
            true,
        );
        let bias = p.add(
            "bias",
            uniform(rng, &[d_out], bound).to_kind(kind),
            true,
        );
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&self.weight, Some(&self.bias))
    }

    pub fn in_dim(&self) -> i64 {
        self.weight.size()[1]
    }
}

pub(crate) fn param_count(tensors: &[&Tensor]) -> i64 {
    tensors.iter().map(|t| t.numel() as i64).sum()
}

/// Row-wise L2 normalization with a small floor on the norm.
pub fn l2_normalize(x: &Tensor) -> Tensor {
    let norm = x
        .square()
        .sum_dim_intlist(-1, true, None::<Kind>)
        .clamp_min(1e-24)
        .sqrt();
    x / norm
}
