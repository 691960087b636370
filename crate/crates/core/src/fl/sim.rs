use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{shapes, split_vector, DitherStream, GeneratorMatrix, TruncatedLattice};
use crate::learning::{
    fit_scale_mode, normalize_generator, online_lattice_learning, ClientObjective, LearnerConfig, LossKind,
    OverloadMode, PriorNet,
};
use crate::rng::{chacha, derive_seed, tags};

use super::dataset::{load_idx, partition_dataset, synthetic, Dataset, SyntheticSpec};
use super::model::{evaluate, local_train, Model, ModelKind, ShardObjective};
use super::protocol::{bits_accounting, encode_update, raw_bits, server_round, Payload, PayloadBody};

/// Support radius of every truncated lattice; scaling is carried by ζ.
pub const GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuantizerKind {
    None,
    FixedHex,
    FixedA2,
    FixedD2,
    FixedSquare,
    StaticGlobal,
    StaticPerUser,
    Olala,
}

impl QuantizerKind {
    pub const ALL: [QuantizerKind; 8] = [
        QuantizerKind::None,
        QuantizerKind::FixedHex,
        QuantizerKind::FixedA2,
        QuantizerKind::FixedD2,
        QuantizerKind::FixedSquare,
        QuantizerKind::StaticGlobal,
        QuantizerKind::StaticPerUser,
        QuantizerKind::Olala,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::None => "none",
            QuantizerKind::FixedHex => "fixed_hex",
            QuantizerKind::FixedA2 => "fixed_a2",
            QuantizerKind::FixedD2 => "fixed_d2",
            QuantizerKind::FixedSquare => "fixed_square",
            QuantizerKind::StaticGlobal => "static_global",
            QuantizerKind::StaticPerUser => "static_per_user",
            QuantizerKind::Olala => "olala",
        }
    }

    /// Generator shape for the fixed two-dimensional lattices.
    pub fn fixed_shape(self) -> Option<GeneratorMatrix> {
        match self {
            QuantizerKind::FixedHex => Some(shapes::hexagonal()),
            QuantizerKind::FixedA2 => Some(shapes::a2()),
            QuantizerKind::FixedD2 => Some(shapes::d2()),
            QuantizerKind::FixedSquare => Some(shapes::square()),
            _ => None,
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, QuantizerKind::StaticGlobal | QuantizerKind::StaticPerUser | QuantizerKind::Olala)
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuantizerKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = QuantizerKind::ALL.iter().map(|k| k.name()).collect();
            Error::Usage(format!("unknown quantizer '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf, classes: usize },
}

/// Every knob of one federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub model: ModelKind,
    pub hidden: [usize; 2],
    pub data: DataConfig,
    pub users: usize,
    pub dim: usize,
    pub rate: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub local_lr: f64,
    pub adapt_every: usize,
    pub quantizer: QuantizerKind,
    pub loss: LossKind,
    /// `None` picks the loss kind's default step size.
    pub lattice_lr: Option<f64>,
    pub epochs: usize,
    pub batches: usize,
    pub overload: OverloadMode,
    pub include_zeta: bool,
    pub reset_theta_each_round: bool,
    pub master_seed: u64,
    pub parallel: usize,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Linear,
            hidden: [64, 32],
            data: DataConfig::Synthetic(SyntheticSpec::default()),
            users: 5,
            dim: 2,
            rate: 2.0,
            rounds: 20,
            local_steps: 100,
            local_lr: 0.1,
            adapt_every: 1,
            quantizer: QuantizerKind::Olala,
            loss: LossKind::Mse,
            lattice_lr: None,
            epochs: 20,
            batches: 8,
            overload: OverloadMode::Fraction(OverloadMode::DEFAULT_FRACTION),
            include_zeta: true,
            reset_theta_each_round: false,
            master_seed: 0,
            parallel: 1,
        }
    }
}

fn field(key: &str, msg: impl fmt::Display) -> Error {
    Error::Usage(format!("{key}: {msg}"))
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(field("U", "must be at least 1"));
        }
        if self.dim == 0 || self.dim > crate::lattice::MAX_DIM {
            return Err(field("L", format!("must be in 1..={}", crate::lattice::MAX_DIM)));
        }
        if !self.rate.is_finite() || self.rate <= 0.0 || self.rate > 16.0 {
            return Err(field("R", format!("must be in (0, 16], got {}", self.rate)));
        }
        if self.quantizer.fixed_shape().is_some() && self.dim != 2 {
            return Err(field("L", format!("quantizer {} is two-dimensional; L must be 2", self.quantizer)));
        }
        if self.local_steps == 0 {
            return Err(field("local_steps", "must be at least 1"));
        }
        if !self.local_lr.is_finite() || self.local_lr < 0.0 {
            return Err(field("local_lr", "must be a finite non-negative number"));
        }
        if self.adapt_every == 0 {
            return Err(field("adapt_every", "must be at least 1"));
        }
        if let Some(lr) = self.lattice_lr {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(field("lattice_lr", "must be positive"));
            }
        }
        if self.batches == 0 {
            return Err(field("batches", "must be at least 1"));
        }
        if self.parallel == 0 {
            return Err(field("parallel", "must be at least 1"));
        }
        if self.model == ModelKind::Mlp && self.hidden.contains(&0) {
            return Err(field("hidden", "layer widths must be positive"));
        }
        self.learner(0).validate().map_err(|e| field("overload_mode", e))?;
        if let DataConfig::Synthetic(s) = &self.data {
            if s.classes < 3 {
                return Err(field("classes", "the partition needs at least 3 classes"));
            }
        }
        Ok(())
    }

    fn learner(&self, seed: u64) -> LearnerConfig {
        let mut cfg = LearnerConfig::new(self.loss, self.rate, seed);
        cfg.learning_rate = self.lattice_lr.unwrap_or(self.loss.default_learning_rate());
        cfg.epochs = self.epochs;
        cfg.batches = if self.loss == LossKind::Task { 1 } else { self.batches };
        cfg.gamma = GAMMA;
        cfg.overload = self.overload;
        cfg
    }
}

/// Per-client metrics for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client: usize,
    /// Row-major generator; empty for unquantized uploads.
    pub gen: Vec<f64>,
    pub zeta: f64,
    pub codebook_len: usize,
    pub distortion: f64,
    pub snr_db: f64,
    pub overload: f64,
    pub bits: u64,
    pub adapted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    pub accuracy: f64,
    pub mean_snr_db: f64,
    pub mean_distortion: f64,
    pub total_bits: u64,
    pub clients: Vec<ClientRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rounds: Vec<RoundRecord>,
    pub model: Model,
    pub initial_accuracy: f64,
}

impl RunOutput {
    /// Mean test accuracy over the last `k` rounds (or the initial accuracy
    /// for an empty run).
    pub fn final_accuracy(&self, k: usize) -> f64 {
        if self.rounds.is_empty() {
            return self.initial_accuracy;
        }
        let tail = &self.rounds[self.rounds.len().saturating_sub(k.max(1))..];
        tail.iter().map(|r| r.accuracy).sum::<f64>() / tail.len() as f64
    }
}

struct Client {
    id: usize,
    shard: Dataset,
    xi: u64,
    net: Option<PriorNet>,
    lattice: Option<TruncatedLattice>,
}

struct Outcome {
    bytes: Vec<u8>,
    reconstruction: Vec<f64>,
    record: ClientRecord,
}

pub fn load_data(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DataConfig::Synthetic(s) => synthetic(s),
        DataConfig::Idx { train_images, train_labels, test_images, test_labels, classes } => {
            let train = load_idx(train_images, train_labels, *classes)?;
            let test = load_idx(test_images, test_labels, *classes)?;
            if train.dim() != test.dim() {
                return Err(Error::Dataset("train and test images differ in size".into()));
            }
            Ok((train, test))
        }
    }
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl Client {
    fn learn(&mut self, cfg: &FlConfig, w: &Model, h: &[f64], t: usize) -> Result<TruncatedLattice> {
        if self.net.is_none() || cfg.reset_theta_each_round {
            self.net = Some(PriorNet::new(cfg.dim, derive_seed(self.xi, &[tags::INIT]))?);
        }
        let net = self.net.as_mut().expect("network initialised");
        let learner = cfg.learner(derive_seed(self.xi, &[tags::LEARN, t as u64]));
        let objective = ShardObjective { model: w, shard: &self.shard };
        let obj: Option<&dyn ClientObjective> = (cfg.loss == LossKind::Task).then_some(&objective);
        let learned = online_lattice_learning(net, w.params(), h, &learner, obj)?;
        TruncatedLattice::build(&learned.gen, GAMMA)
    }

    fn round(&mut self, cfg: &FlConfig, global: &Model, t: usize) -> Result<Outcome> {
        let mut rng = chacha(derive_seed(self.xi, &[tags::LOCAL_TRAIN, t as u64]));
        let h = local_train(global, &self.shard, cfg.local_steps, cfg.local_lr, &mut rng)
            .map_err(|e| Error::Numeric(format!("client {} round {t}: {e}", self.id)))?;
        let m = h.len();
        if cfg.quantizer == QuantizerKind::None {
            let payload = Payload { client: self.id as u32, round: t as u64, body: PayloadBody::Raw(h.clone()) };
            return Ok(Outcome {
                bytes: payload.to_bytes(),
                reconstruction: h,
                record: ClientRecord {
                    client: self.id,
                    gen: Vec::new(),
                    zeta: 1.0,
                    codebook_len: 0,
                    distortion: 0.0,
                    snr_db: f64::INFINITY,
                    overload: 0.0,
                    bits: raw_bits(m),
                    adapted: false,
                },
            });
        }
        let adapt = match cfg.quantizer {
            QuantizerKind::Olala => t % cfg.adapt_every == 0 || self.lattice.is_none(),
            QuantizerKind::StaticPerUser => self.lattice.is_none(),
            _ => false,
        };
        if adapt {
            self.lattice = Some(self.learn(cfg, global, &h, t)?);
        }
        let lattice = self.lattice.as_ref().expect("lattice chosen before encoding");
        let gen = lattice.generator().clone();
        let split = split_vector(&h, cfg.dim)?;
        let mut probe = DitherStream::new(derive_seed(self.xi, &[tags::PROBE, t as u64]), gen.clone());
        let zeta = fit_scale_mode(&split.blocks, lattice, &mut probe, cfg.overload)?.zeta;
        let enc = encode_update(self.id as u32, t as u64, self.xi, &h, lattice, zeta)?;
        let distortion: f64 = enc.reconstruction.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum();
        let signal = energy(&h);
        let snr_db = if distortion > 0.0 { 10.0 * (signal / distortion).log10() } else { f64::INFINITY };
        Ok(Outcome {
            bytes: enc.payload.to_bytes(),
            reconstruction: enc.reconstruction,
            record: ClientRecord {
                client: self.id,
                gen: gen.entries().to_vec(),
                zeta,
                codebook_len: lattice.len(),
                distortion,
                snr_db,
                overload: enc.overloaded as f64 / enc.blocks as f64,
                bits: bits_accounting(m, cfg.rate, cfg.dim, cfg.include_zeta),
                adapted: adapt,
            },
        })
    }
}

/// One lattice learned from every client's first local update (taken from
/// the initial model), shared by all clients for the whole run.
fn calibrate_global(cfg: &FlConfig, clients: &[Client], w0: &Model) -> Result<TruncatedLattice> {
    let mut pooled = Vec::new();
    for c in clients {
        let mut rng = chacha(derive_seed(c.xi, &[tags::CALIBRATION]));
        pooled.extend(local_train(w0, &c.shard, cfg.local_steps, cfg.local_lr, &mut rng)?);
    }
    let mut learner = cfg.learner(derive_seed(cfg.master_seed, &[tags::CALIBRATION]));
    if learner.loss == LossKind::Task {
        learner.loss = LossKind::Mse;
        learner.learning_rate = cfg.lattice_lr.unwrap_or(LossKind::Mse.default_learning_rate());
        learner.batches = cfg.batches;
    }
    let mut net = PriorNet::new(cfg.dim, derive_seed(cfg.master_seed, &[tags::INIT, tags::CALIBRATION]))?;
    let zeros = vec![0.0; pooled.len()];
    let learned = online_lattice_learning(&mut net, &zeros, &pooled, &learner, None)?;
    TruncatedLattice::build(&learned.gen, GAMMA)
}

pub fn client_seed(master: u64, u: usize) -> u64 {
    derive_seed(master, &[tags::CLIENT, u as u64])
}

/// Runs the federated experiment described by `cfg`.
pub fn run_fl(cfg: &FlConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    run_fl_on(cfg, &train, &test)
}

pub fn run_fl_on(cfg: &FlConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let shards = partition_dataset(train, cfg.users, derive_seed(cfg.master_seed, &[tags::PARTITION]))?;
    let mut clients = Vec::with_capacity(cfg.users);
    for (u, idx) in shards.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Partition(format!("client {u} received no samples")));
        }
        clients.push(Client {
            id: u,
            shard: train.subset(idx)?,
            xi: client_seed(cfg.master_seed, u),
            net: None,
            lattice: None,
        });
    }
    let mut global = Model::new(
        cfg.model,
        train.dim(),
        train.classes(),
        cfg.hidden,
        derive_seed(cfg.master_seed, &[tags::INIT]),
    )?;
    let initial_accuracy = evaluate(&global, test);

    let preset = match cfg.quantizer {
        q if q.fixed_shape().is_some() => {
            let shape = q.fixed_shape().expect("fixed shape");
            let n = normalize_generator(shape.entries(), 2, cfg.rate, GAMMA)?;
            Some(TruncatedLattice::build(&n.gen, GAMMA)?)
        }
        QuantizerKind::StaticGlobal => Some(calibrate_global(cfg, &clients, &global)?),
        _ => None,
    };
    if let Some(lat) = &preset {
        for c in &mut clients {
            c.lattice = Some(lat.clone());
        }
    }
    let seeds: Vec<u64> = clients.iter().map(|c| c.xi).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(|e| Error::Usage(format!("parallel: {e}")))?;

    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let outcomes: Vec<Outcome> = pool.install(|| {
            clients.par_iter_mut().map(|c| c.round(cfg, &global, t)).collect::<Result<Vec<_>>>()
        })?;
        let payloads = outcomes.iter().map(|o| Payload::from_bytes(&o.bytes)).collect::<Result<Vec<_>>>()?;
        let decoded = server_round(&payloads, global.params_mut(), &seeds, t as u64, GAMMA)?;
        for (o, d) in outcomes.iter().zip(&decoded) {
            if o.reconstruction.iter().zip(d).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::Protocol(format!(
                    "round {t}: server reconstruction of client {} differs from the client's",
                    o.record.client
                )));
            }
        }
        if global.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("global model diverged in round {t}")));
        }
        let clients_rec: Vec<ClientRecord> = outcomes.into_iter().map(|o| o.record).collect();
        let n = clients_rec.len() as f64;
        let record = RoundRecord {
            t,
            accuracy: evaluate(&global, test),
            mean_snr_db: clients_rec.iter().map(|c| c.snr_db).sum::<f64>() / n,
            mean_distortion: clients_rec.iter().map(|c| c.distortion).sum::<f64>() / n,
            total_bits: clients_rec.iter().map(|c| c.bits).sum(),
            clients: clients_rec,
        };
        log::info!(
            "round {t}: accuracy {:.4}, mean SNR {:.2} dB",
            record.accuracy,
            record.mean_snr_db
        );
        rounds.push(record);
    }
    Ok(RunOutput { rounds, model: global, initial_accuracy })
}
