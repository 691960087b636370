use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learning::ClientObjective;
use crate::rng::chacha;

use super::dataset::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Softmax regression.
    Linear,
    /// Two ReLU hidden layers, softmax output.
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::Usage(format!("unknown model '{other}' (expected linear or mlp)"))),
        }
    }
}

/// A dense classifier stored as one flat parameter vector. Layer `k` maps
/// `widths[k] → widths[k+1]` with weights `out × in` (row-major) followed by
/// the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    widths: Vec<usize>,
    params: Vec<f64>,
}

fn layer_len(widths: &[usize], k: usize) -> usize {
    widths[k + 1] * (widths[k] + 1)
}

impl Model {
    pub fn widths_for(kind: ModelKind, input: usize, classes: usize, hidden: [usize; 2]) -> Vec<usize> {
        match kind {
            ModelKind::Linear => vec![input, classes],
            ModelKind::Mlp => vec![input, hidden[0], hidden[1], classes],
        }
    }

    /// Zero-bias init with weights uniform in `±√(6/(in+out))`; the linear
    /// model starts at zero.
    pub fn new(kind: ModelKind, input: usize, classes: usize, hidden: [usize; 2], seed: u64) -> Result<Self> {
        let widths = Self::widths_for(kind, input, classes, hidden);
        if widths.contains(&0) {
            return Err(Error::Usage(format!("layer widths must be positive, got {widths:?}")));
        }
        let mut params = vec![0.0; (0..widths.len() - 1).map(|k| layer_len(&widths, k)).sum()];
        if kind == ModelKind::Mlp {
            let mut rng = chacha(seed);
            let mut off = 0;
            for k in 0..widths.len() - 1 {
                let (i, o) = (widths[k], widths[k + 1]);
                let a = (6.0 / (i + o) as f64).sqrt();
                for v in &mut params[off..off + i * o] {
                    *v = rng.random_range(-a..a);
                }
                off += layer_len(&widths, k);
            }
        }
        Ok(Self { kind, widths, params })
    }

    pub fn from_params(kind: ModelKind, widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let expected = match kind {
            ModelKind::Linear => 2,
            ModelKind::Mlp => 4,
        };
        if widths.len() != expected || widths.contains(&0) {
            return Err(Error::Usage(format!("{kind} model cannot have layer widths {widths:?}")));
        }
        let m: usize = (0..widths.len() - 1).map(|k| layer_len(&widths, k)).sum();
        if params.len() != m {
            return Err(Error::Usage(format!("expected {m} parameters, got {}", params.len())));
        }
        Ok(Self { kind, widths, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Activations of every layer for input `x` using parameters `p`; the
    /// last entry holds the logits.
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.widths.len() - 2;
        for k in 0..=last {
            let (i, o) = (self.widths[k], self.widths[k + 1]);
            let w = &p[off..off + i * o];
            let b = &p[off + i * o..off + i * o + o];
            let a = acts.last().expect("input layer");
            let z: Vec<f64> = (0..o)
                .map(|r| {
                    let v = b[r] + w[r * i..(r + 1) * i].iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
                    if k < last {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect();
            acts.push(z);
            off += layer_len(&self.widths, k);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(&self.params, x).pop().expect("logits")
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Cross-entropy at `(x, y)` under parameters `p`; adds `scale · ∇` into
    /// `grad`.
    pub fn loss_grad_at(&self, p: &[f64], x: &[f64], y: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let acts = self.forward(p, x);
        let logits = acts.last().expect("logits");
        let (loss, mut delta) = softmax_xent(logits, y);
        let mut offsets = Vec::with_capacity(self.widths.len() - 1);
        let mut off = 0;
        for k in 0..self.widths.len() - 1 {
            offsets.push(off);
            off += layer_len(&self.widths, k);
        }
        for k in (0..self.widths.len() - 1).rev() {
            let (i, o) = (self.widths[k], self.widths[k + 1]);
            let off = offsets[k];
            let a = &acts[k];
            for r in 0..o {
                let d = delta[r] * scale;
                if d != 0.0 {
                    for (g, av) in grad[off + r * i..off + (r + 1) * i].iter_mut().zip(a) {
                        *g += d * av;
                    }
                }
                grad[off + i * o + r] += d;
            }
            if k > 0 {
                let w = &p[off..off + i * o];
                let mut prev = vec![0.0; i];
                for r in 0..o {
                    if delta[r] != 0.0 {
                        for (pv, wv) in prev.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                            *pv += delta[r] * wv;
                        }
                    }
                }
                for (pv, av) in prev.iter_mut().zip(a) {
                    if *av <= 0.0 {
                        *pv = 0.0;
                    }
                }
                delta = prev;
            }
        }
        loss
    }

    pub fn loss_grad(&self, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        self.loss_grad_at(&self.params, x, y, 1.0, grad)
    }

    /// Little-endian binary form: magic, kind, layer widths, parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.len());
        out.extend_from_slice(b"OLMD");
        out.push(match self.kind {
            ModelKind::Linear => 0,
            ModelKind::Mlp => 1,
        });
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for &w in &self.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Protocol("malformed model file".into());
        if bytes.get(..4) != Some(b"OLMD".as_slice()) {
            return Err(bad());
        }
        let kind = match bytes.get(4) {
            Some(0) => ModelKind::Linear,
            Some(1) => ModelKind::Mlp,
            _ => return Err(bad()),
        };
        let u32_at = |at: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(bytes.get(at..at + 4).ok_or_else(bad)?.try_into().expect("4 bytes")))
        };
        let n = u32_at(5)? as usize;
        if n > 16 {
            return Err(bad());
        }
        let widths: Vec<usize> = (0..n).map(|k| u32_at(9 + 4 * k).map(|w| w as usize)).collect::<Result<_>>()?;
        let at = 9 + 4 * n;
        let m = u64::from_le_bytes(bytes.get(at..at + 8).ok_or_else(bad)?.try_into().expect("8 bytes")) as usize;
        let body = bytes.get(at + 8..).ok_or_else(bad)?;
        if body.len() != 8 * m {
            return Err(bad());
        }
        let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Model::from_params(kind, widths, params)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `softmax(logits)` against `y` and its logit gradient.
fn softmax_xent(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[y] - mx);
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[y] -= 1.0;
    (loss, g)
}

/// `steps` single-sample SGD steps on the shard, returning `w_after − w_before`.
pub fn local_train(model: &Model, shard: &Dataset, steps: usize, lr: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Usage("local training needs at least one step".into()));
    }
    let mut p = model.params.clone();
    let mut g = vec![0.0; p.len()];
    for step in 0..steps {
        let i = rng.random_range(0..shard.len());
        g.iter_mut().for_each(|v| *v = 0.0);
        let loss = model.loss_grad_at(&p, shard.row(i), shard.label(i), 1.0, &mut g);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss at local step {step}")));
        }
        for (w, gv) in p.iter_mut().zip(&g) {
            *w -= lr * gv;
        }
    }
    Ok(p.iter().zip(&model.params).map(|(a, b)| a - b).collect())
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(model: &Model, test: &Dataset) -> f64 {
    let correct = (0..test.len()).filter(|&i| model.predict(test.row(i)) == test.label(i)).count();
    correct as f64 / test.len() as f64
}

/// Mean cross-entropy over a shard, as a function of the parameters.
pub struct ShardObjective<'a> {
    pub model: &'a Model,
    pub shard: &'a Dataset,
}

impl ClientObjective for ShardObjective<'_> {
    fn loss(&self, w: &[f64]) -> f64 {
        let mut scratch = vec![0.0; w.len()];
        let n = self.shard.len() as f64;
        (0..self.shard.len())
            .map(|i| self.model.loss_grad_at(w, self.shard.row(i), self.shard.label(i), 0.0, &mut scratch))
            .sum::<f64>()
            / n
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / self.shard.len() as f64;
        for i in 0..self.shard.len() {
            self.model.loss_grad_at(w, self.shard.row(i), self.shard.label(i), scale, &mut g);
        }
        g
    }
}
