use std::path::PathBuf;

use log::info;
use olala::fl::{run_fl, QuantizerKind, RunOutput};
use olala::theory::{run_all, suite_passed, CheckReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::OutputSet;
use crate::CliError;

fn pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Output(format!("cannot start {threads} worker threads: {e}")))
}

fn rounds_csv(run: &RunOutput) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "accuracy", "mean_snr_db", "mean_distortion", "total_bits"])
        .map_err(|e| CliError::Output(e.to_string()))?;
    for r in &run.rounds {
        w.write_record([
            r.t.to_string(),
            r.accuracy.to_string(),
            r.mean_snr_db.to_string(),
            r.mean_distortion.to_string(),
            r.total_bits.to_string(),
        ])
        .map_err(|e| CliError::Output(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Output(e.to_string()))
}

#[derive(Serialize)]
struct LatticeLine<'a> {
    t: usize,
    u: usize,
    #[serde(rename = "G")]
    g: &'a [f64],
    zeta: f64,
    codebook_size: usize,
}

/// One line per client whenever its lattice is (re)chosen: every adaptation
/// of a learned lattice, and the first round for fixed or shared ones.
fn lattices_jsonl(run: &RunOutput) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for (k, r) in run.rounds.iter().enumerate() {
        for c in &r.clients {
            if c.gen.is_empty() || !(c.adapted || k == 0) {
                continue;
            }
            let line = LatticeLine { t: r.t, u: c.client, g: &c.gen, zeta: c.zeta, codebook_size: c.codebook_len };
            serde_json::to_writer(&mut out, &line).map_err(|e| CliError::Output(e.to_string()))?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

/// Result of the `run` verb.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub final_accuracy: f64,
}

/// One federated experiment; writes `rounds.csv`, `lattices.jsonl` and
/// `model.bin` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let mut out = OutputSet::new(&cfg.out)?;
    info!("running {} for {} rounds", cfg.fl.quantizer, cfg.fl.rounds);
    let run = run_fl(&cfg.fl)?;
    out.write("rounds.csv", &rounds_csv(&run)?)?;
    out.write("lattices.jsonl", &lattices_jsonl(&run)?)?;
    out.write("model.bin", &run.model.to_bytes())?;
    let files = out.commit()?;
    Ok(RunSummary { files, final_accuracy: run.final_accuracy(cfg.final_window) })
}

#[derive(Serialize)]
struct ChecksFile<'a> {
    passed: bool,
    checks: &'a [CheckReport],
}

/// The full theory suite; writes `checks.json`. Returns the reports and
/// whether every check other than the negative controls passed.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<(Vec<CheckReport>, bool), CliError> {
    let mut out = OutputSet::new(&cfg.out)?;
    let reports = pool(cfg.fl.parallel)?.install(|| run_all(&cfg.checks))?;
    let passed = suite_passed(&reports);
    let mut json = serde_json::to_vec_pretty(&ChecksFile { passed, checks: &reports })
        .map_err(|e| CliError::Output(e.to_string()))?;
    json.push(b'\n');
    out.write("checks.json", &json)?;
    out.commit()?;
    Ok((reports, passed))
}

/// One row of the sweep table: a (quantizer, rate) pair averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub quantizer: String,
    #[serde(rename = "R")]
    pub rate: f64,
    pub seeds: u64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub snr_db_mean: f64,
    pub bits_per_round: f64,
}

struct Entry {
    quantizer: QuantizerKind,
    rate: f64,
    seed: u64,
}

struct EntryResult {
    accuracy: f64,
    snr_db: f64,
    bits: f64,
    csv: Vec<u8>,
}

fn run_entry(cfg: &ExperimentConfig, e: &Entry) -> Result<EntryResult, CliError> {
    let mut fl = cfg.fl.clone();
    fl.quantizer = e.quantizer;
    fl.rate = e.rate;
    fl.master_seed = e.seed;
    fl.parallel = 1;
    fl.validate()?;
    let run = run_fl(&fl)?;
    let k = cfg.final_window.min(run.rounds.len()).max(1);
    let tail = &run.rounds[run.rounds.len().saturating_sub(k)..];
    let n = tail.len().max(1) as f64;
    Ok(EntryResult {
        accuracy: run.final_accuracy(cfg.final_window),
        snr_db: tail.iter().map(|r| r.mean_snr_db).sum::<f64>() / n,
        bits: tail.iter().map(|r| r.total_bits as f64).sum::<f64>() / n,
        csv: rounds_csv(&run)?,
    })
}

/// Every (quantizer, rate) pair over `seeds` consecutive seeds. Entries run
/// in parallel; each writes `entries/<quantizer>_R<rate>_seed<seed>.csv`,
/// and the merged `sweep.csv` has one row per pair in configuration order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let mut out = OutputSet::new(&cfg.out)?;
    let mut entries = Vec::new();
    for &q in &cfg.sweep_quantizers {
        for &r in &cfg.sweep_rates {
            for s in 0..cfg.sweep_seeds {
                entries.push(Entry { quantizer: q, rate: r, seed: cfg.fl.master_seed.wrapping_add(s) });
            }
        }
    }
    let results: Vec<Result<EntryResult, CliError>> =
        pool(cfg.fl.parallel)?.install(|| entries.par_iter().map(|e| run_entry(cfg, e)).collect());
    let mut rows = Vec::new();
    let per = cfg.sweep_seeds as usize;
    let mut results = results.into_iter();
    for chunk in entries.chunks(per) {
        let mut acc = Vec::with_capacity(per);
        let (mut snr, mut bits) = (0.0, 0.0);
        for e in chunk {
            let r = results.next().expect("one result per entry")?;
            out.write(&format!("entries/{}_R{}_seed{}.csv", e.quantizer, e.rate, e.seed), &r.csv)?;
            acc.push(r.accuracy);
            snr += r.snr_db / per as f64;
            bits += r.bits / per as f64;
        }
        let mean = acc.iter().sum::<f64>() / per as f64;
        let std = if per > 1 {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (per - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            quantizer: chunk[0].quantizer.to_string(),
            rate: chunk[0].rate,
            seeds: cfg.sweep_seeds,
            accuracy_mean: mean,
            accuracy_std: std,
            snr_db_mean: snr,
            bits_per_round: bits,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Output(e.to_string()))?;
    }
    out.write("sweep.csv", &w.into_inner().map_err(|e| CliError::Output(e.to_string()))?)?;
    out.commit()?;
    Ok(rows)
}
