//! End-to-end experiments: data, model, optional federated training, attacks
//! on defended victim gradients, metrics and on-disk artifacts.

mod config;
mod pnm;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DataConfig, DataSource, ExperimentConfig, ModelConfig, OutputConfig, VbSection};
pub use pnm::{dump_image, encode_pnm, parse_pnm, quantize};

use crate::attack::{run_attack, AttackError, AttackSpec, Termination};
use crate::data::{parse_cifar10_bin, parse_idx, split_clients, synth_train_test, DataError, Dataset, IdxData};
use crate::defense::{apply_defense, DefenseError, DefensePolicy};
use crate::federated::{run_federated, write_round_logs, FederatedError, RoundLog};
use crate::metrics::{image_metrics, ImageMetrics};
use crate::model::{build_mlp, insert_precode, save_checkpoint, training_gradient, MlpConfig, ModelError, ModelGraph};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("image: {0}")]
    Image(String),
    #[error("results: {0}")]
    Results(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Federated(#[from] FederatedError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ReportError {
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config { .. })
    }
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

/// Outcome of attacking one victim image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimResult {
    pub victim_id: usize,
    /// Index of the victim in the training set.
    pub index: usize,
    pub label: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub iters: usize,
    pub reason: String,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub defense: String,
    pub selection: String,
    pub rows: Vec<VictimResult>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_iters: f64,
    /// Final test accuracy when the model was trained first.
    pub accuracy: Option<f64>,
}

impl MetricReport {
    pub fn new(defense: String, selection: String, rows: Vec<VictimResult>, accuracy: Option<f64>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&VictimResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mean_mse: mean(|r| r.mse),
            mean_psnr: mean(|r| r.psnr),
            mean_ssim: mean(|r| r.ssim),
            mean_iters: mean(|r| r.iters as f64),
            defense,
            selection,
            rows,
            accuracy,
        }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DATA_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const VB_STREAM: u64 = 3;
const VICTIM_STREAM: u64 = 4;
const SHARD_STREAM: u64 = 5;

fn cap(ds: Dataset, n: usize) -> Dataset {
    if ds.len() <= n {
        ds
    } else {
        ds.subset(&(0..n).collect::<Vec<_>>())
    }
}

fn read_mnist(files: &[PathBuf]) -> Result<Dataset> {
    let images = match parse_idx(&fs::read(&files[0])?)? {
        IdxData::Images(t) => t,
        IdxData::Labels(_) => return Err(DataError::Invalid("expected an image file first".into()).into()),
    };
    let labels = match parse_idx(&fs::read(&files[1])?)? {
        IdxData::Labels(l) => l,
        IdxData::Images(_) => return Err(DataError::Invalid("expected a label file second".into()).into()),
    };
    Ok(Dataset::new(images, labels, 10)?)
}

fn read_cifar(files: &[PathBuf]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(f)?);
    }
    Ok(parse_cifar10_bin(&bytes)?)
}

/// Train and test sets. Missing files fall back to synthetic data with a
/// warning.
pub fn load_data(config: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let synthetic =
        || synth_train_test(mix(seed, DATA_STREAM), config.train_size, config.test_size, config.shape, config.classes);
    let missing = config
        .train_files
        .iter()
        .chain(&config.test_files)
        .find(|p| !p.exists());
    let read: fn(&[PathBuf]) -> Result<Dataset> = match config.source {
        DataSource::Synthetic => return Ok(synthetic()),
        DataSource::Mnist => read_mnist,
        DataSource::Cifar10 => read_cifar,
    };
    if let Some(p) = missing {
        log::warn!("{} not found; using synthetic data", p.display());
        return Ok(synthetic());
    }
    let train = cap(read(&config.train_files)?, config.train_size);
    let test = cap(read(&config.test_files)?, config.test_size);
    Ok((train, test))
}

/// Model described by the config: MLP plus optional bottleneck.
pub fn build_model(config: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<ModelGraph> {
    let mlp = MlpConfig {
        hidden: config.model.hidden.clone(),
        batchnorm: config.model.batchnorm,
        bias: config.model.bias,
    };
    let mut model = build_mlp(input_dim, classes, &mlp, mix(config.seed, MODEL_STREAM))?;
    model.objective = config.model.objective;
    if let Some(vb) = config.vb {
        model = insert_precode(&model, vb.k, vb.beta, mix(config.seed, VB_STREAM))?;
    }
    Ok(model)
}

/// Mean and standard deviation of all pixels.
pub fn pixel_stats(ds: &Dataset) -> (f64, f64) {
    let d = ds.images.data();
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// Data, model and (when configured) federated training.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub model: ModelGraph,
    /// Training data of the client whose images get attacked.
    pub victim_pool: Dataset,
    pub rounds: Vec<RoundLog>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = load_data(&config.data, config.seed)?;
    let classes = train.num_classes;
    let model = build_model(config, train.image_len(), classes)?;
    let Some(fed) = &config.federated else {
        return Ok(Prepared {
            victim_pool: train.clone(),
            train,
            test,
            model,
            rounds: Vec::new(),
        });
    };
    let mut fed = fed.clone();
    fed.seed = config.seed;
    fed.defense = config.defense.clone();
    let shards = split_clients(&train, fed.clients, mix(config.seed, SHARD_STREAM))?;
    let (model, rounds) = run_federated(model, &shards, &test, &fed)?;
    Ok(Prepared {
        victim_pool: shards[0].clone(),
        train,
        test,
        model,
        rounds,
    })
}

/// Attacks `count` images of `pool` on `model` under `defense`.
///
/// Victims are the first `count` entries of a seeded permutation. Each victim
/// owns a generator derived from `(seed, victim)` that drives its training
/// step, its defense and its attack, so victims run in parallel without
/// affecting each other.
pub fn attack_victims(
    model: &ModelGraph,
    pool: &Dataset,
    count: usize,
    defense: &DefensePolicy,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<(VictimResult, crate::attack::AttackResult)>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, VICTIM_STREAM)));
    let shape = pool.image_shape();
    order
        .into_par_iter()
        .take(count)
        .enumerate()
        .map(|(victim_id, index)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, VICTIM_STREAM), victim_id as u64 + 1));
            let x = pool.image(index);
            let label = pool.labels[index];
            let grads = training_gradient(model, &x, &[label], &mut rng)?;
            let observed = apply_defense(defense, model, &grads, &mut rng)?;
            let s = AttackSpec {
                label,
                ..spec.clone()
            };
            let result = run_attack(model, &observed, &shape, &s, &mut rng)?;
            let m: ImageMetrics = image_metrics(&x, &result.image, 1.0)?;
            let row = VictimResult {
                victim_id,
                index,
                label,
                mse: m.mse,
                psnr: m.psnr,
                ssim: m.ssim,
                iters: result.trace.iterations,
                reason: result.termination().as_str().to_string(),
                final_loss: result.final_loss,
            };
            Ok((row, result))
        })
        .collect()
}

/// Runs the full experiment and writes its artifacts under
/// `config.output.dir`:
///
/// * `report.csv`: one row per victim
/// * `summary.json`: the [`MetricReport`]
/// * `rounds.jsonl`: federated round log, when training ran
/// * `victim_<id>_original.pgm` / `victim_<id>_reconstruction.pgm` (`.ppm` for colour)
/// * `victim_<id>_trace.csv`
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricReport> {
    let prepared = prepare(config)?;
    let mut spec = config.attack.clone();
    if spec.normalization.is_none() {
        spec.normalization = Some(pixel_stats(&prepared.train));
    }
    let selection = spec.selection.resolve(&prepared.model);
    let results = attack_victims(
        &prepared.model,
        &prepared.victim_pool,
        config.data.victims,
        &config.defense,
        &spec,
        config.seed,
    )?;

    let accuracy = prepared.rounds.last().map(|r| r.accuracy);
    let rows: Vec<VictimResult> = results.iter().map(|(r, _)| r.clone()).collect();
    let report = MetricReport::new(config.defense.to_string(), selection.as_str().to_string(), rows, accuracy);

    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    write_report(&report, dir.join("report.csv"))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if !prepared.rounds.is_empty() {
        write_round_logs(&prepared.rounds, fs::File::create(dir.join("rounds.jsonl"))?)?;
    }
    let ext = if prepared.train.image_shape()[0] == 3 { "ppm" } else { "pgm" };
    for (row, result) in &results {
        let id = row.victim_id;
        if config.output.images {
            dump_image(&prepared.victim_pool.image(row.index), dir.join(format!("victim_{id}_original.{ext}")))?;
            dump_image(&result.image, dir.join(format!("victim_{id}_reconstruction.{ext}")))?;
        }
        if config.output.traces {
            let f = fs::File::create(dir.join(format!("victim_{id}_trace.csv")))?;
            result.trace.write_csv(std::io::BufWriter::new(f))?;
        }
    }
    log::info!(
        "{}: mean ssim {:.4}, psnr {:.2} dB over {} victims",
        report.defense,
        report.mean_ssim,
        report.mean_psnr,
        report.rows.len()
    );
    Ok(report)
}

/// Federated training only; writes `rounds.jsonl` and `model.glck`.
pub fn run_training(config: &ExperimentConfig) -> Result<Vec<RoundLog>> {
    let mut config = config.clone();
    config.federated.get_or_insert_with(Default::default);
    config.validate()?;
    let prepared = prepare(&config)?;
    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    write_round_logs(&prepared.rounds, fs::File::create(dir.join("rounds.jsonl"))?)?;
    save_checkpoint(&prepared.model, dir.join("model.glck"))?;
    Ok(prepared.rounds)
}

pub const REPORT_HEADER: &str = "victim_id,defense,selection,mse,psnr,ssim,iters,reason";

/// Per-victim CSV table.
pub fn format_report(report: &MetricReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.victim_id, report.defense, report.selection, r.mse, r.psnr, r.ssim, r.iters, r.reason
        );
    }
    out
}

pub fn write_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_report(report))?;
    Ok(())
}

/// The defense grid: no defense, noise at four levels, pruning at two
/// ratios, the bottleneck alone, and partial perturbation with each of the
/// noise and pruning settings.
pub fn defense_grid() -> Vec<DefensePolicy> {
    let perturbations: Vec<DefensePolicy> = [1e-3, 1e-2, 1e-1, 5e-1]
        .into_iter()
        .map(|sigma| DefensePolicy::Ng { sigma })
        .chain([0.9, 0.99].into_iter().map(|p| DefensePolicy::Gc { p }))
        .collect();
    let mut grid = vec![DefensePolicy::None];
    grid.extend(perturbations.iter().cloned());
    grid.push(DefensePolicy::Precode);
    grid.extend(perturbations.into_iter().map(|inner| DefensePolicy::Ppp { inner: Box::new(inner) }));
    grid
}

/// File-system friendly name of a defense.
pub fn defense_slug(policy: &DefensePolicy) -> String {
    policy
        .to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Runs the experiment once per defense in [`defense_grid`], each in its own
/// subdirectory, and writes `sweep.csv`. Defenses with a bottleneck use the
/// configured `vb` section or its default; the others drop it.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    for policy in defense_grid() {
        let mut c = config.clone();
        c.vb = if policy.needs_vb() {
            Some(config.vb.unwrap_or_default())
        } else {
            None
        };
        c.output.dir = config.output.dir.join(defense_slug(&policy));
        c.defense = policy;
        reports.push(run_experiment(&c)?);
    }
    fs::create_dir_all(&config.output.dir)?;
    fs::write(config.output.dir.join("sweep.csv"), format_summary(&reports))?;
    Ok(reports)
}

/// One line per report: defense, selection, accuracy and mean metrics.
pub fn format_summary(reports: &[MetricReport]) -> String {
    let mut out = String::from("defense,selection,accuracy,mse,psnr,ssim,iters\n");
    for r in reports {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.defense, r.selection, acc, r.mean_mse, r.mean_psnr, r.mean_ssim, r.mean_iters
        );
    }
    out
}

/// Collects every `summary.json` in `dir` and its immediate subdirectories,
/// sorted by path.
pub fn collect_reports(dir: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(ReportError::Results(format!("{} is not a directory", dir.display())));
    }
    let mut paths = Vec::new();
    let own = dir.join("summary.json");
    if own.is_file() {
        paths.push(own);
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path().join("summary.json");
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(ReportError::Results(format!("no summary.json under {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .collect()
}

/// Fixed-width table of the collected reports.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:<15} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "defense", "selection", "acc", "ssim", "psnr", "mse", "iters"
    );
    for r in reports {
        let acc = r.accuracy.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let _ = writeln!(
            out,
            "{:<18} {:<15} {:>8} {:>8.3} {:>8.2} {:>8.4} {:>8.0}",
            r.defense, r.selection, acc, r.mean_ssim, r.mean_psnr, r.mean_mse, r.mean_iters
        );
    }
    out
}

/// Writes `text` to stdout; a closed pipe is not an error.
pub fn print(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

/// Whether a termination reason string names a converged attack.
pub fn is_converged(reason: &str) -> bool {
    reason == Termination::Converged.as_str()
}
