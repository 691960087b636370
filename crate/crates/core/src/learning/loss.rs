use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lattice::{recombine, SdqCodec, MAX_DIM};

use super::prior::{ForwardPass, PriorNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Squared quantization error of the update.
    Mse,
    /// Negative signal-to-distortion ratio.
    NegSnr,
    /// Local training loss after applying the quantized update.
    Task,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::NegSnr => "neg_snr",
            LossKind::Task => "task",
        }
    }

    /// Default step size per loss kind.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            LossKind::Mse => 1e-6,
            LossKind::NegSnr => 1e-4,
            LossKind::Task => 1e-7,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "neg_snr" => Ok(LossKind::NegSnr),
            "task" => Ok(LossKind::Task),
            other => Err(Error::Usage(format!("unknown loss kind '{other}' (expected mse, neg_snr or task)"))),
        }
    }
}

/// A client's local empirical risk `F_u(w)` and its gradient.
pub trait ClientObjective {
    fn loss(&self, w: &[f64]) -> f64;
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
}

/// Subvectors with their dithers. `padding` only matters for the task loss,
/// where the blocks are the whole update in order.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub blocks: &'a [f64],
    pub dithers: &'a [f64],
    pub padding: usize,
}

/// Task-loss context: the current model and the client objective.
#[derive(Clone, Copy)]
pub struct TaskContext<'a> {
    pub w: &'a [f64],
    pub objective: &'a dyn ClientObjective,
}

fn check_batch(batch: &Batch<'_>, dim: usize) -> Result<usize> {
    if batch.blocks.is_empty() {
        return Err(Error::Usage("loss needs a non-empty batch".into()));
    }
    if batch.blocks.len() % dim != 0 || batch.dithers.len() != batch.blocks.len() {
        return Err(Error::Usage(format!(
            "batch of {} values and {} dither values does not match block length {dim}",
            batch.blocks.len(),
            batch.dithers.len()
        )));
    }
    Ok(batch.blocks.len() / dim)
}

/// Nearest-codeword coefficient vectors `l*` for every dithered block.
pub fn assignments(codec: &SdqCodec, batch: &Batch<'_>) -> Result<Vec<i64>> {
    let dim = codec.lattice().dim();
    let n = check_batch(batch, dim)?;
    let zeta = codec.zeta();
    let mut out = Vec::with_capacity(n * dim);
    let mut y = [0.0; MAX_DIM];
    for (x, d) in batch.blocks.chunks_exact(dim).zip(batch.dithers.chunks_exact(dim)) {
        for j in 0..dim {
            y[j] = zeta * x[j] + d[j];
        }
        let i = codec.lattice().nearest_index(&y[..dim]);
        out.extend_from_slice(codec.lattice().index(i));
    }
    Ok(out)
}

/// Loss and `∂loss/∂G` (row-major) for generator entries `gen`, with the
/// assignments `l*` held fixed: each reconstruction is `(G·l* − d)/ζ`.
pub fn loss_with_assignments(
    kind: LossKind,
    gen: &[f64],
    dim: usize,
    l: &[i64],
    batch: &Batch<'_>,
    zeta: f64,
    task: Option<TaskContext<'_>>,
) -> Result<(f64, Vec<f64>)> {
    let n = check_batch(batch, dim)?;
    if l.len() != n * dim || gen.len() != dim * dim {
        return Err(Error::Usage("assignment or generator shape mismatch".into()));
    }
    let mut recon = vec![0.0; n * dim];
    for b in 0..n {
        for i in 0..dim {
            let mut v = -batch.dithers[b * dim + i];
            for j in 0..dim {
                v += gen[i * dim + j] * l[b * dim + j] as f64;
            }
            recon[b * dim + i] = v / zeta;
        }
    }
    // `g_r` holds ∂loss/∂reconstruction per block.
    let (loss, g_r) = match kind {
        LossKind::Mse | LossKind::NegSnr => {
            let err: Vec<f64> = batch.blocks.iter().zip(&recon).map(|(x, r)| x - r).collect();
            let dist: f64 = err.iter().map(|e| e * e).sum();
            if kind == LossKind::Mse {
                (dist, err.iter().map(|e| -2.0 * e).collect::<Vec<_>>())
            } else {
                let signal: f64 = batch.blocks.iter().map(|x| x * x).sum();
                if !(dist > 0.0) {
                    return Err(Error::Numeric("zero distortion makes the SNR loss undefined".into()));
                }
                let k = signal / (dist * dist);
                (-signal / dist, err.iter().map(|e| -2.0 * e * k).collect())
            }
        }
        LossKind::Task => {
            let ctx = task.ok_or_else(|| Error::Usage("task loss needs the model and client objective".into()))?;
            let h = recombine(&recon, batch.padding);
            if h.len() != ctx.w.len() {
                return Err(Error::Usage(format!(
                    "task loss needs the whole update ({} values), got {}",
                    ctx.w.len(),
                    h.len()
                )));
            }
            let w: Vec<f64> = ctx.w.iter().zip(&h).map(|(a, b)| a + b).collect();
            let mut g = ctx.objective.gradient(&w);
            g.resize(n * dim, 0.0);
            (ctx.objective.loss(&w), g)
        }
    };
    let mut grad = vec![0.0; dim * dim];
    for b in 0..n {
        for i in 0..dim {
            let gi = g_r[b * dim + i] / zeta;
            if gi == 0.0 {
                continue;
            }
            for j in 0..dim {
                grad[i * dim + j] += gi * l[b * dim + j] as f64;
            }
        }
    }
    Ok((loss, grad))
}

/// Loss of the codec's quantizer on `batch`.
pub fn compute_loss(
    kind: LossKind,
    batch: &Batch<'_>,
    codec: &SdqCodec,
    task: Option<TaskContext<'_>>,
) -> Result<f64> {
    let l = assignments(codec, batch)?;
    let g = codec.lattice().generator();
    Ok(loss_with_assignments(kind, g.entries(), g.dim(), &l, batch, codec.zeta(), task)?.0)
}

/// Gradient over the prior network's parameters with the nearest-codeword
/// assignments and the normalisation factor `scale` held fixed.
pub fn lattice_grad(
    net: &PriorNet,
    pass: &ForwardPass,
    scale: f64,
    kind: LossKind,
    batch: &Batch<'_>,
    codec: &SdqCodec,
    task: Option<TaskContext<'_>>,
) -> Result<(f64, Vec<f64>)> {
    let l = assignments(codec, batch)?;
    let g = codec.lattice().generator();
    let (loss, grad_g) = loss_with_assignments(kind, g.entries(), g.dim(), &l, batch, codec.zeta(), task)?;
    let grad_raw: Vec<f64> = grad_g.iter().map(|v| v * scale).collect();
    Ok((loss, net.backward(pass, &grad_raw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{DitherStream, GeneratorMatrix, TruncatedLattice};

    fn codec(g: &GeneratorMatrix, zeta: f64) -> SdqCodec {
        let lat = TruncatedLattice::build(g, 1.0).unwrap();
        SdqCodec::new(lat, zeta, DitherStream::new(0, g.clone())).unwrap()
    }

    #[test]
    fn codewords_without_dither_have_zero_mse() {
        let g = GeneratorMatrix::identity(2).scaled(0.25).unwrap();
        let c = codec(&g, 1.0);
        let blocks = [0.25, 0.5, -0.75, 0.0, 0.0, 0.0];
        let batch = Batch { blocks: &blocks, dithers: &[0.0; 6], padding: 0 };
        assert_eq!(compute_loss(LossKind::Mse, &batch, &c, None).unwrap(), 0.0);
    }

    #[test]
    fn origin_assignments_give_zero_generator_gradient() {
        let g = GeneratorMatrix::identity(2).scaled(0.5).unwrap();
        let c = codec(&g, 1.0);
        let blocks = [0.1, -0.1, 0.05, 0.2];
        let batch = Batch { blocks: &blocks, dithers: &[0.0; 4], padding: 0 };
        let l = assignments(&c, &batch).unwrap();
        assert!(l.iter().all(|&v| v == 0));
        for kind in [LossKind::Mse, LossKind::NegSnr] {
            let (_, grad) = loss_with_assignments(kind, g.entries(), 2, &l, &batch, 1.0, None).unwrap();
            assert_eq!(grad, vec![0.0; 4]);
        }
    }

    #[test]
    fn mse_is_additive_over_blocks() {
        let g = GeneratorMatrix::identity(2).scaled(0.3).unwrap();
        let c = codec(&g, 2.0);
        let blocks = [0.11, -0.2, 0.31, 0.05, -0.4, 0.17];
        let dithers = [0.01, -0.1, 0.12, 0.02, -0.03, 0.08];
        let whole = compute_loss(LossKind::Mse, &Batch { blocks: &blocks, dithers: &dithers, padding: 0 }, &c, None)
            .unwrap();
        let parts: f64 = (0..3)
            .map(|b| {
                let s = b * 2..b * 2 + 2;
                compute_loss(
                    LossKind::Mse,
                    &Batch { blocks: &blocks[s.clone()], dithers: &dithers[s], padding: 0 },
                    &c,
                    None,
                )
                .unwrap()
            })
            .sum();
        assert!((whole - parts).abs() < 1e-15);
    }

    #[test]
    fn task_loss_requires_context() {
        let g = GeneratorMatrix::identity(1).scaled(0.5).unwrap();
        let c = codec(&g, 1.0);
        let batch = Batch { blocks: &[0.1], dithers: &[0.0], padding: 0 };
        assert!(compute_loss(LossKind::Task, &batch, &c, None).is_err());
    }

    #[test]
    fn loss_names_roundtrip() {
        for k in [LossKind::Mse, LossKind::NegSnr, LossKind::Task] {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("l2".parse::<LossKind>().is_err());
    }
}
