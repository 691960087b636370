use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::chacha;

pub const PRIOR_INPUT: usize = 16;
pub const PRIOR_HIDDEN: usize = 32;

/// Small fully connected net `16 → 32 → 32 → L²` with tanh hidden layers and
/// a fixed all-ones input; its reshaped output is the raw generator.
///
/// `theta` layout: `W1 (32×16), b1, W2 (32×32), b2, W3 (L²×32), b3`, weights
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorNet {
    dim: usize,
    theta: Vec<f64>,
}

/// Hidden activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub output: Vec<f64>,
}

const W1: usize = 0;
const B1: usize = W1 + PRIOR_HIDDEN * PRIOR_INPUT;
const W2: usize = B1 + PRIOR_HIDDEN;
const B2: usize = W2 + PRIOR_HIDDEN * PRIOR_HIDDEN;
const W3: usize = B2 + PRIOR_HIDDEN;

pub fn prior_param_count(dim: usize) -> usize {
    W3 + (PRIOR_HIDDEN + 1) * dim * dim
}

/// Generator the initial network reproduces: hexagonal for `L = 2`, the
/// identity otherwise.
pub fn warm_start_target(dim: usize) -> Vec<f64> {
    if dim == 2 {
        vec![1.0, 0.5, 0.0, 3f64.sqrt() / 2.0]
    } else {
        let mut t = vec![0.0; dim * dim];
        for i in 0..dim {
            t[i * dim + i] = 1.0;
        }
        t
    }
}

impl PriorNet {
    /// Uniform fan-in initialisation, then the output bias is chosen so the
    /// forward pass equals `target` exactly (up to rounding).
    pub fn with_target(dim: usize, seed: u64, target: &[f64]) -> Result<Self> {
        if dim == 0 || target.len() != dim * dim {
            return Err(Error::Usage(format!("target must be {dim}×{dim}")));
        }
        let mut rng = chacha(seed);
        let mut theta = vec![0.0; prior_param_count(dim)];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in &mut theta[range] {
                *v = rng.random_range(-a..a);
            }
        };
        fill(W1..W2, PRIOR_INPUT);
        fill(W2..W3, PRIOR_HIDDEN);
        let out = dim * dim;
        fill(W3..W3 + out * PRIOR_HIDDEN + out, PRIOR_HIDDEN);
        let mut net = Self { dim, theta };
        let pass = net.forward_pass()?;
        let b3 = W3 + out * PRIOR_HIDDEN;
        for k in 0..out {
            net.theta[b3 + k] += target[k] - pass.output[k];
        }
        Ok(net)
    }

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        Self::with_target(dim, seed, &warm_start_target(dim))
    }

    pub fn from_theta(dim: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != prior_param_count(dim) {
            return Err(Error::Usage(format!(
                "prior network for L={dim} needs {} parameters, got {}",
                prior_param_count(dim),
                theta.len()
            )));
        }
        Ok(Self { dim, theta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn input() -> [f64; PRIOR_INPUT] {
        [1.0; PRIOR_INPUT]
    }

    /// Raw `L×L` generator entries, row-major.
    pub fn forward(&self) -> Result<Vec<f64>> {
        Ok(self.forward_pass()?.output)
    }

    pub fn forward_pass(&self) -> Result<ForwardPass> {
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prior network has non-finite parameters".into()));
        }
        let t = &self.theta;
        let s = Self::input();
        let a1 = dense(&t[W1..B1], &t[B1..W2], &s, true);
        let a2 = dense(&t[W2..B2], &t[B2..W3], &a1, true);
        let out = self.dim * self.dim;
        let b3 = W3 + out * PRIOR_HIDDEN;
        let output = dense(&t[W3..b3], &t[b3..b3 + out], &a2, false);
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prior network output is not finite".into()));
        }
        Ok(ForwardPass { a1, a2, output })
    }

    /// Gradient over `theta` given `∂loss/∂output`.
    pub fn backward(&self, pass: &ForwardPass, grad_out: &[f64]) -> Vec<f64> {
        let t = &self.theta;
        let out = self.dim * self.dim;
        let b3 = W3 + out * PRIOR_HIDDEN;
        let mut g = vec![0.0; t.len()];
        let s = Self::input();

        let mut d2 = vec![0.0; PRIOR_HIDDEN];
        for k in 0..out {
            let go = grad_out[k];
            g[b3 + k] = go;
            for j in 0..PRIOR_HIDDEN {
                g[W3 + k * PRIOR_HIDDEN + j] = go * pass.a2[j];
                d2[j] += go * t[W3 + k * PRIOR_HIDDEN + j];
            }
        }
        for j in 0..PRIOR_HIDDEN {
            d2[j] *= 1.0 - pass.a2[j] * pass.a2[j];
        }
        let mut d1 = vec![0.0; PRIOR_HIDDEN];
        for j in 0..PRIOR_HIDDEN {
            g[B2 + j] = d2[j];
            for i in 0..PRIOR_HIDDEN {
                g[W2 + j * PRIOR_HIDDEN + i] = d2[j] * pass.a1[i];
                d1[i] += d2[j] * t[W2 + j * PRIOR_HIDDEN + i];
            }
        }
        for i in 0..PRIOR_HIDDEN {
            let di = d1[i] * (1.0 - pass.a1[i] * pass.a1[i]);
            g[B1 + i] = di;
            for k in 0..PRIOR_INPUT {
                g[W1 + i * PRIOR_INPUT + k] = di * s[k];
            }
        }
        g
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], tanh: bool) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let z = bias + w[r * x.len()..(r + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if tanh {
                z.tanh()
            } else {
                z
            }
        })
        .collect()
}
