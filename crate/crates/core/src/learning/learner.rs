use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::lattice::{
    fit_scale, split_vector, DitherStream, GeneratorMatrix, ScaleFit, SdqCodec, TruncatedLattice,
};
use crate::rng::{chacha, derive_seed, tags};

use super::loss::{lattice_grad, Batch, ClientObjective, LossKind, TaskContext};
use super::normalize::{normalize_generator, Normalized};
use super::prior::PriorNet;

/// How the input scale ζ is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverloadMode {
    /// At most this fraction of blocks may fall outside the support ball.
    Fraction(f64),
    /// Drop blocks more than `sigma_mult` per-coordinate standard deviations
    /// from the mean, then allow `target` overload on the rest.
    HeuristicMinus1 { sigma_mult: f64, target: f64 },
}

impl OverloadMode {
    pub const DEFAULT_FRACTION: f64 = 0.005;

    pub fn heuristic() -> Self {
        OverloadMode::HeuristicMinus1 { sigma_mult: 3.0, target: 0.003 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batches: usize,
    pub rate: f64,
    pub gamma: f64,
    pub overload: OverloadMode,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn new(loss: LossKind, rate: f64, seed: u64) -> Self {
        Self {
            loss,
            learning_rate: loss.default_learning_rate(),
            epochs: 20,
            batches: if loss == LossKind::Task { 1 } else { 8 },
            rate,
            gamma: 1.0,
            overload: OverloadMode::Fraction(OverloadMode::DEFAULT_FRACTION),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Usage(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batches == 0 {
            return Err(Error::Usage("number of batches must be at least 1".into()));
        }
        if self.loss == LossKind::Task && self.batches != 1 {
            return Err(Error::Usage("the task loss needs the whole update: batches must be 1".into()));
        }
        if !self.rate.is_finite() || self.rate <= 0.0 {
            return Err(Error::Usage(format!("rate must be positive, got {}", self.rate)));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::Usage(format!("support radius must be positive, got {}", self.gamma)));
        }
        match self.overload {
            OverloadMode::Fraction(p) if !(0.0..1.0).contains(&p) => {
                Err(Error::Usage(format!("overload fraction must lie in [0, 1), got {p}")))
            }
            OverloadMode::HeuristicMinus1 { sigma_mult, target }
                if !(sigma_mult > 0.0) || !(0.0..1.0).contains(&target) =>
            {
                Err(Error::Usage("heuristic overload needs a positive multiplier and a target in [0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Output of one learning call: the generator, its input scale and the
/// network state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedLattice {
    pub gen: GeneratorMatrix,
    pub zeta: f64,
    pub theta: Vec<f64>,
    pub codebook_len: usize,
    /// Training objective of the starting and the emitted lattice.
    pub objective_before: f64,
    pub objective_after: f64,
    /// The trained parameters were discarded because they did not improve
    /// the objective.
    pub reverted: bool,
    pub reversions: usize,
}

impl LearnedLattice {
    /// Wire form: `u32` L, row-major `f64` generator, `f64` ζ (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.gen.to_bytes();
        out.extend_from_slice(&self.zeta.to_le_bytes());
        out
    }

    pub fn decode_metadata(bytes: &[u8]) -> Result<(GeneratorMatrix, f64, usize)> {
        let (gen, used) = GeneratorMatrix::from_bytes(bytes)?;
        let z = bytes
            .get(used..used + 8)
            .ok_or_else(|| Error::Protocol("truncated lattice metadata: missing scale".into()))?;
        let zeta = f64::from_le_bytes(z.try_into().expect("8 bytes"));
        if !zeta.is_finite() || zeta <= 0.0 {
            return Err(Error::Protocol(format!("invalid scale {zeta} in lattice metadata")));
        }
        Ok((gen, zeta, used + 8))
    }
}

/// Chooses ζ for `blocks` under `mode`, drawing probe dithers from `probe`.
pub fn fit_scale_mode(
    blocks: &[f64],
    lattice: &TruncatedLattice,
    probe: &mut DitherStream,
    mode: OverloadMode,
) -> Result<ScaleFit> {
    match mode {
        OverloadMode::Fraction(p) => fit_scale(blocks, lattice, probe, p),
        OverloadMode::HeuristicMinus1 { sigma_mult, target } => {
            overload_heuristic_minus1(blocks, lattice, probe, sigma_mult, target)
        }
    }
}

/// Variance-filtered scale fit: blocks whose every coordinate lies strictly
/// within `sigma_mult` standard deviations of the coordinate mean are kept,
/// and ζ is fitted on those. Falls back to all blocks if none survive.
pub fn overload_heuristic_minus1(
    blocks: &[f64],
    lattice: &TruncatedLattice,
    probe: &mut DitherStream,
    sigma_mult: f64,
    target: f64,
) -> Result<ScaleFit> {
    let dim = lattice.dim();
    if blocks.len() % dim != 0 || blocks.len() / dim < 10 {
        return Err(Error::Usage("the overload heuristic needs at least 10 subvectors".into()));
    }
    let n = blocks.len() / dim;
    let mut mean = vec![0.0; dim];
    for b in blocks.chunks_exact(dim) {
        for j in 0..dim {
            mean[j] += b[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for b in blocks.chunks_exact(dim) {
        for j in 0..dim {
            var[j] += (b[j] - mean[j]).powi(2);
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    let kept: Vec<f64> = blocks
        .chunks_exact(dim)
        .filter(|b| (0..dim).all(|j| (b[j] - mean[j]).abs() < sigma_mult * sd[j]))
        .flatten()
        .copied()
        .collect();
    if kept.is_empty() {
        log::debug!("overload heuristic filtered every subvector; fitting on all {n}");
        return fit_scale(blocks, lattice, probe, target);
    }
    fit_scale(&kept, lattice, probe, target)
}

struct Split {
    blocks: Vec<f64>,
    padding: usize,
}

/// Objective used by the safeguard: quantization distortion of `h` in its own
/// units for the distortion losses, `F_u(w + Q(h))` for the task loss. ζ and
/// the dithers come from fixed evaluation streams so different lattices are
/// compared on equal terms.
fn evaluate(
    lattice: &TruncatedLattice,
    split: &Split,
    cfg: &LearnerConfig,
    task: Option<TaskContext<'_>>,
) -> Result<(f64, f64)> {
    let gen = lattice.generator().clone();
    let mut probe = DitherStream::new(derive_seed(cfg.seed, &[tags::PROBE, u64::MAX]), gen.clone());
    let zeta = fit_scale_mode(&split.blocks, lattice, &mut probe, cfg.overload)?.zeta;
    let dithers = DitherStream::new(derive_seed(cfg.seed, &[tags::EVAL_DITHER]), gen.clone())
        .sample_many(split.blocks.len() / gen.dim());
    let codec = SdqCodec::new(lattice.clone(), zeta, DitherStream::new(0, gen.clone()))?;
    let batch = Batch { blocks: &split.blocks, dithers: &dithers, padding: split.padding };
    let kind = if cfg.loss == LossKind::Task { LossKind::Task } else { LossKind::Mse };
    Ok((super::loss::compute_loss(kind, &batch, &codec, task)?, zeta))
}

/// Objective the safeguard compares for a given generator on update `h`.
pub fn training_objective(
    gen: &GeneratorMatrix,
    h: &[f64],
    cfg: &LearnerConfig,
    task: Option<TaskContext<'_>>,
) -> Result<f64> {
    let split = split_vector(h, gen.dim())?;
    let lattice = TruncatedLattice::build(gen, cfg.gamma)?;
    Ok(evaluate(&lattice, &Split { blocks: split.blocks, padding: split.padding }, cfg, task)?.0)
}

fn normalized(net: &PriorNet, cfg: &LearnerConfig) -> Result<(Normalized, TruncatedLattice)> {
    let raw = net.forward()?;
    let n = normalize_generator(&raw, net.dim(), cfg.rate, cfg.gamma)?;
    let lat = TruncatedLattice::build(&n.gen, cfg.gamma)?;
    Ok((n, lat))
}

const MAX_REVERSIONS: usize = 3;

/// Adapts the prior network to update `h` by minibatch SGD on the chosen loss
/// and returns the resulting lattice. `net` is updated in place; if training
/// does not improve the objective it is restored to its starting state.
///
/// Training runs on ζ-scaled subvectors (ζ refitted at the start of each
/// epoch and held fixed within it), so the step size does not depend on the
/// magnitude of `h`.
pub fn online_lattice_learning(
    net: &mut PriorNet,
    w: &[f64],
    h: &[f64],
    cfg: &LearnerConfig,
    objective: Option<&dyn ClientObjective>,
) -> Result<LearnedLattice> {
    cfg.validate()?;
    if w.len() != h.len() {
        return Err(Error::Usage(format!("model has {} values but the update {}", w.len(), h.len())));
    }
    let task = match (cfg.loss, objective) {
        (LossKind::Task, Some(o)) => Some(TaskContext { w, objective: o }),
        (LossKind::Task, None) => return Err(Error::Usage("task loss needs a client objective".into())),
        _ => None,
    };
    let dim = net.dim();
    let sv = split_vector(h, dim)?;
    let split = Split { blocks: sv.blocks, padding: sv.padding };
    let m = split.blocks.len() / dim;

    let theta0 = net.theta().to_vec();
    let (norm0, lat0) = normalized(net, cfg)?;
    let (obj0, zeta0) = evaluate(&lat0, &split, cfg, task)?;

    let mut rng = chacha(derive_seed(cfg.seed, &[tags::LEARN]));
    let mut eta = cfg.learning_rate;
    let mut reversions = 0;
    let mut last_valid = theta0.clone();
    let mut order: Vec<usize> = (0..m).collect();
    let mut scaled = vec![0.0; split.blocks.len()];
    let mut batch_blocks = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        let (_, lat) = match normalized(net, cfg) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("epoch {epoch}: {e}; reverting");
                net.theta_mut().copy_from_slice(&last_valid);
                reversions += 1;
                eta *= 0.1;
                if reversions > MAX_REVERSIONS {
                    break 'epochs;
                }
                continue;
            }
        };
        let mut probe = DitherStream::new(derive_seed(cfg.seed, &[tags::PROBE, epoch as u64]), lat.generator().clone());
        let zeta = fit_scale_mode(&split.blocks, &lat, &mut probe, cfg.overload)?.zeta;
        for (s, x) in scaled.iter_mut().zip(&split.blocks) {
            *s = zeta * x;
        }
        if cfg.loss != LossKind::Task {
            order.shuffle(&mut rng);
        }
        let per = m.div_ceil(cfg.batches);
        for (b, chunk) in order.chunks(per).enumerate() {
            let step = normalized(net, cfg).and_then(|(n, lat)| {
                let pass = net.forward_pass()?;
                let gen = lat.generator().clone();
                let dithers = DitherStream::new(
                    derive_seed(cfg.seed, &[tags::LEARN_DITHER, epoch as u64, b as u64]),
                    gen.clone(),
                )
                .sample_many(chunk.len());
                batch_blocks.clear();
                for &i in chunk {
                    batch_blocks.extend_from_slice(&scaled[i * dim..(i + 1) * dim]);
                }
                // Distortion losses see ζ-scaled blocks through a unit-scale
                // codec; the task loss needs the update in model units.
                let (loss, grad) = if cfg.loss == LossKind::Task {
                    let codec = SdqCodec::new(lat, zeta, DitherStream::new(0, gen))?;
                    let batch = Batch { blocks: &split.blocks, dithers: &dithers, padding: split.padding };
                    lattice_grad(net, &pass, n.scale, cfg.loss, &batch, &codec, task)?
                } else {
                    let codec = SdqCodec::new(lat, 1.0, DitherStream::new(0, gen))?;
                    let batch = Batch { blocks: &batch_blocks, dithers: &dithers, padding: 0 };
                    lattice_grad(net, &pass, n.scale, cfg.loss, &batch, &codec, None)?
                };
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric("non-finite loss or gradient".into()));
                }
                Ok(grad)
            });
            match step {
                Ok(grad) => {
                    last_valid.copy_from_slice(net.theta());
                    for (t, g) in net.theta_mut().iter_mut().zip(&grad) {
                        *t -= eta * g;
                    }
                }
                Err(e) => {
                    log::debug!("epoch {epoch} batch {b}: {e}; reverting");
                    net.theta_mut().copy_from_slice(&last_valid);
                    reversions += 1;
                    eta *= 0.1;
                    if reversions > MAX_REVERSIONS {
                        break 'epochs;
                    }
                }
            }
        }
    }

    let trained = match normalized(net, cfg) {
        Ok(v) => Some(v),
        Err(_) => {
            net.theta_mut().copy_from_slice(&last_valid);
            normalized(net, cfg).ok()
        }
    };
    if let Some((n, lat)) = trained {
        if net.theta() != theta0.as_slice() {
            let (obj, zeta) = evaluate(&lat, &split, cfg, task)?;
            if obj <= obj0 {
                return Ok(LearnedLattice {
                    gen: n.gen,
                    zeta,
                    theta: net.theta().to_vec(),
                    codebook_len: n.codebook_len,
                    objective_before: obj0,
                    objective_after: obj,
                    reverted: false,
                    reversions,
                });
            }
        }
    }
    let reverted = net.theta() != theta0.as_slice();
    net.theta_mut().copy_from_slice(&theta0);
    Ok(LearnedLattice {
        gen: norm0.gen,
        zeta: zeta0,
        theta: theta0,
        codebook_len: norm0.codebook_len,
        objective_before: obj0,
        objective_after: obj0,
        reverted,
        reversions,
    })
}
