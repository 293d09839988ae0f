//! Two-phase subset pretraining: minimize the loss on one `1/b` subset,
//! then fine-tune on the whole training set. Also the overdetermination
//! ratio, aggregation over subsets, the sample-presentation cost model, and
//! report emission.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DatasetSource, ExperimentConfig, OptimizerConfig};
use crate::data::{
    augment_tenfold, load_cifar10, load_cifar100, load_idx, partition_subsets, synthesize_dataset,
    synthesize_validation, Cifar100Labels, DataError, Dataset, SubsetPlan,
};
use crate::network::{parameter_count, Network, NetworkError};
use crate::optim::{adam_step, cg_step, sgd_step, AdamState, CgState, OptimError};
use crate::tensor::SeededRng;

const PARTITION_LABEL: u64 = 0x5041_5254;
const ORDER_LABEL: u64 = 0x4f52_4452;

/// Column names of the five mean loss series.
pub const SERIES: [&str; 5] = [
    "Subset_pretraining",
    "Trset_pretraining",
    "Validset_pretraining",
    "Trset_finetuning",
    "Validset_finetuning",
];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProtocolError + '_ {
    move |source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `Q = K M / P`.
pub fn overdetermination_ratio(k: usize, m: usize, p: usize) -> Result<f64, ProtocolError> {
    if k == 0 || m == 0 || p == 0 {
        return Err(ProtocolError::Invalid(format!(
            "overdetermination ratio needs positive K, M, P (got {k}, {m}, {p})"
        )));
    }
    Ok((k as f64 * m as f64) / p as f64)
}

/// Subset fraction at which the subset ratio equals one: `P / (K M)`.
pub fn q_unity_fraction(k: usize, m: usize, p: usize) -> f64 {
    p as f64 / (k as f64 * m as f64)
}

/// Sample presentations of one run: `epochs_pre * floor(K/b) + epochs_ft * K`.
pub fn presentations(b: usize, epochs_pre: usize, epochs_ft: usize, k: usize) -> u64 {
    (epochs_pre * (k / b.max(1)) + epochs_ft * k) as u64
}

/// Cost of a `b` run as a percentage of the `b = 1` run.
pub fn relative_cost(b: usize, epochs_pre: usize, epochs_ft: usize, k: usize) -> f64 {
    let base = presentations(1, epochs_pre, epochs_ft, k);
    if base == 0 {
        return 100.0;
    }
    100.0 * presentations(b, epochs_pre, epochs_ft, k) as f64 / base as f64
}

/// Loss and accuracy at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub loss: f64,
    pub accuracy: f64,
}

impl Point {
    const FAILED: Point = Point {
        loss: f64::NAN,
        accuracy: f64::NAN,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub b: usize,
    pub subset_id: usize,
    pub subset_size: usize,
    /// `None` on success; the failure message otherwise.
    pub failure: Option<String>,
    /// Subset after pretraining (E_b).
    pub subset_pre: Point,
    /// Training set after pretraining (E_BT).
    pub train_pre: Point,
    /// Validation set after pretraining (E_BV).
    pub valid_pre: Point,
    /// Training set after fine-tuning (E_T).
    pub train_ft: Point,
    /// Validation set after fine-tuning (E_V).
    pub valid_ft: Point,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub presentations: u64,
    pub optimizer_steps: u64,
}

impl MetricsRecord {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    /// Points in series order.
    pub fn points(&self) -> [Point; 5] {
        [
            self.subset_pre,
            self.train_pre,
            self.valid_pre,
            self.train_ft,
            self.valid_ft,
        ]
    }

    /// Pretraining generalization gap `E_BT - E_b`.
    pub fn pretrain_gap(&self) -> f64 {
        self.train_pre.loss - self.subset_pre.loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub b: usize,
    pub fraction: f64,
    pub runs: usize,
    pub failed: usize,
    /// Mean of each series over successful runs.
    pub mean: [Point; 5],
    pub q: f64,
    /// Ratio with `floor(K/b)` in place of `K`.
    pub subset_q: f64,
    pub q_unity_fraction: f64,
}

/// Training and validation data for a config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), ProtocolError> {
    let (train, valid) = match &cfg.dataset {
        &DatasetSource::Synthetic {
            train,
            validation,
            classes,
            height,
            width,
            channels,
            difficulty,
            seed,
        } => (
            synthesize_dataset(train, classes, height, width, channels, seed, difficulty)?,
            synthesize_validation(
                validation, classes, height, width, channels, seed, difficulty,
            )?,
        ),
        DatasetSource::Mnist(dir) => (
            load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?,
            load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?,
        ),
        DatasetSource::Cifar10(dir) => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let refs: Vec<&Path> = batches.iter().map(PathBuf::as_path).collect();
            (
                load_cifar10(&refs)?,
                load_cifar10(&[dir.join("test_batch.bin").as_path()])?,
            )
        }
        DatasetSource::Cifar100(dir) => (
            load_cifar100(&dir.join("train.bin"), Cifar100Labels::Fine)?,
            load_cifar100(&dir.join("test.bin"), Cifar100Labels::Fine)?,
        ),
    };
    let train = match &cfg.augment {
        Some((params, seed)) => augment_tenfold(&train, params, *seed)?,
        None => train,
    };
    Ok((train, valid))
}

/// The partition used for every `b` of a config: blocks of one permutation
/// seeded from the master seed.
pub fn subset_plan(
    cfg: &ExperimentConfig,
    k: usize,
    b: usize,
) -> Result<SubsetPlan, ProtocolError> {
    let seed = SeededRng::derive_child(cfg.master_seed, PARTITION_LABEL);
    Ok(partition_subsets(k, b, seed, cfg.max_runs)?)
}

struct PhaseOutcome {
    epoch_losses: Vec<f64>,
    steps: u64,
}

enum OptimizerState {
    Sgd(u64),
    Adam(AdamState),
    Cg(CgState),
}

/// Runs `epochs` passes over `indices`, in place on `net`.
fn train_phase(
    net: &mut Network,
    cfg: &ExperimentConfig,
    data: &Dataset,
    indices: &[usize],
    epochs: usize,
    order_seed: u64,
) -> Result<PhaseOutcome, ProtocolError> {
    let n = indices.len();
    let batch = cfg.batch_size.unwrap_or(n).min(n).max(1);
    let mut state = match &cfg.optimizer {
        OptimizerConfig::Sgd(_) => OptimizerState::Sgd(0),
        OptimizerConfig::Adam(a) => {
            OptimizerState::Adam(AdamState::new(net.parameter_count(), *a)?)
        }
        OptimizerConfig::Cg(_) => OptimizerState::Cg(CgState::new()),
    };
    let mut order = indices.to_vec();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut steps = 0;
    for epoch in 0..epochs {
        if batch < n {
            let mut rng = SeededRng::new(SeededRng::derive_child(order_seed, epoch as u64));
            order.shuffle(rng.inner_mut());
        }
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let loss = match (&mut state, &cfg.optimizer) {
                (OptimizerState::Sgd(t), OptimizerConfig::Sgd(schedule)) => {
                    let (loss, grad) = net.loss_and_gradient_indices(data, chunk)?;
                    *t += 1;
                    sgd_step(net.params_mut(), grad.values(), schedule.rate(*t))?;
                    loss
                }
                (OptimizerState::Adam(s), OptimizerConfig::Adam(_)) => {
                    let (loss, grad) = net.loss_and_gradient_indices(data, chunk)?;
                    adam_step(net.params_mut(), grad.values(), s)?;
                    loss
                }
                (OptimizerState::Cg(s), OptimizerConfig::Cg(cg)) => {
                    let mut probe = net.clone();
                    let mut objective = |w: &[f64]| -> Result<(f64, Vec<f64>), ProtocolError> {
                        probe.set_params(w)?;
                        let (l, g) = probe.loss_and_gradient_indices(data, chunk)?;
                        Ok((l, g.into_values()))
                    };
                    cg_step(&mut objective, s, net.params_mut(), cg)?.loss_before
                }
                _ => unreachable!("optimizer state matches config"),
            };
            if !loss.is_finite() {
                return Err(NetworkError::NonFinite {
                    layer: "loss".into(),
                    sample: 0,
                }
                .into());
            }
            total += loss * chunk.len() as f64;
            steps += 1;
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(PhaseOutcome {
        epoch_losses,
        steps,
    })
}

fn point(net: &Network, data: &Dataset, indices: Option<&[usize]>) -> Result<Point, ProtocolError> {
    let (loss, accuracy) = match indices {
        Some(ix) => net.evaluate_indices(data, ix)?,
        None => net.evaluate(data)?,
    };
    Ok(Point { loss, accuracy })
}

/// One `(b, subset_id)` run. Numeric failures yield a record marked failed.
pub fn run_subset_experiment(
    cfg: &ExperimentConfig,
    train: &Dataset,
    validation: &Dataset,
    plan: &SubsetPlan,
    subset_id: usize,
) -> Result<MetricsRecord, ProtocolError> {
    let subset = plan.subset_indices.get(subset_id).ok_or_else(|| {
        ProtocolError::Invalid(format!("subset {subset_id} not in plan for b={}", plan.b))
    })?;
    let k = train.len();
    let mut record = MetricsRecord {
        b: plan.b,
        subset_id,
        subset_size: subset.len(),
        failure: None,
        subset_pre: Point::FAILED,
        train_pre: Point::FAILED,
        valid_pre: Point::FAILED,
        train_ft: Point::FAILED,
        valid_ft: Point::FAILED,
        pretrain_losses: Vec::new(),
        finetune_losses: Vec::new(),
        presentations: 0,
        optimizer_steps: 0,
    };
    let mut net = Network::build(&cfg.network_spec_for(train))?;
    net.check_dataset(train)?;
    net.check_dataset(validation)?;

    let run_seed = SeededRng::derive_child(
        SeededRng::derive_child(cfg.master_seed, ORDER_LABEL),
        ((plan.b as u64) << 32) | subset_id as u64,
    );
    let all: Vec<usize> = (0..k).collect();

    let result = (|| -> Result<(), ProtocolError> {
        let pre = train_phase(
            &mut net,
            cfg,
            train,
            subset,
            cfg.epochs_pre,
            SeededRng::derive_child(run_seed, 0),
        )?;
        record.pretrain_losses = pre.epoch_losses;
        record.optimizer_steps += pre.steps;
        record.presentations += (cfg.epochs_pre * subset.len()) as u64;
        record.subset_pre = point(&net, train, Some(subset))?;
        record.train_pre = point(&net, train, Some(&all))?;
        record.valid_pre = point(&net, validation, None)?;

        let ft = train_phase(
            &mut net,
            cfg,
            train,
            &all,
            cfg.epochs_ft,
            SeededRng::derive_child(run_seed, 1),
        )?;
        record.finetune_losses = ft.epoch_losses;
        record.optimizer_steps += ft.steps;
        record.presentations += (cfg.epochs_ft * k) as u64;
        if cfg.epochs_ft == 0 {
            record.train_ft = record.train_pre;
            record.valid_ft = record.valid_pre;
        } else {
            record.train_ft = point(&net, train, Some(&all))?;
            record.valid_ft = point(&net, validation, None)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(record),
        Err(ProtocolError::Network(e)) => {
            record.failure = Some(e.to_string());
            Ok(record)
        }
        Err(ProtocolError::Optim(e)) => {
            record.failure = Some(e.to_string());
            Ok(record)
        }
        Err(e) => Err(e),
    }
}

/// Means over the successful records of each `b`, in ascending `b` order.
pub fn aggregate(
    records: &[MetricsRecord],
    k: usize,
    m: usize,
    p: usize,
) -> Result<Vec<AggregateCurve>, ProtocolError> {
    let mut bs: Vec<usize> = records.iter().map(|r| r.b).collect();
    bs.sort_unstable();
    bs.dedup();
    let q = overdetermination_ratio(k, m, p)?;
    bs.into_iter()
        .map(|b| {
            let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.b == b).collect();
            let ok: Vec<&&MetricsRecord> = group.iter().filter(|r| r.is_ok()).collect();
            let mut mean = [Point::FAILED; 5];
            if !ok.is_empty() {
                let n = ok.len() as f64;
                for (s, slot) in mean.iter_mut().enumerate() {
                    let loss = ok.iter().map(|r| r.points()[s].loss).sum::<f64>() / n;
                    let accuracy = ok.iter().map(|r| r.points()[s].accuracy).sum::<f64>() / n;
                    *slot = Point { loss, accuracy };
                }
            }
            Ok(AggregateCurve {
                b,
                fraction: 1.0 / b as f64,
                runs: ok.len(),
                failed: group.len() - ok.len(),
                mean,
                q,
                subset_q: overdetermination_ratio((k / b).max(1), m, p)?,
                q_unity_fraction: q_unity_fraction(k, m, p),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub records: Vec<MetricsRecord>,
    pub curves: Vec<AggregateCurve>,
    pub k: usize,
    pub m: usize,
    pub p: usize,
}

impl GridResult {
    pub fn all_failed(&self) -> bool {
        self.records.iter().all(|r| !r.is_ok())
    }
}

/// Runs the baseline and every selected subset of every configured `b`.
/// Runs execute in parallel; results are ordered by `(b, subset_id)`.
pub fn run_grid_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    validation: &Dataset,
) -> Result<GridResult, ProtocolError> {
    let k = train.len();
    let mut plans = vec![subset_plan(cfg, k, 1)?];
    for &b in &cfg.b_values {
        plans.push(subset_plan(cfg, k, b)?);
    }
    let jobs: Vec<(&SubsetPlan, usize)> = plans
        .iter()
        .flat_map(|p| p.runs_selected.iter().map(move |&i| (p, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(plan, i)| run_subset_experiment(cfg, train, validation, plan, i))
        .collect::<Result<Vec<_>, _>>()?;
    let m = train.class_count;
    let p = parameter_count(&cfg.network_spec_for(train))?;
    let curves = aggregate(&records, k, m, p)?;
    Ok(GridResult {
        records,
        curves,
        k,
        m,
        p,
    })
}

pub fn run_full_grid(cfg: &ExperimentConfig) -> Result<GridResult, ProtocolError> {
    let (train, validation) = prepare_data(cfg)?;
    run_grid_on(cfg, &train, &validation)
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRow {
    b: usize,
    subset_id: usize,
    subset_size: usize,
    failed: bool,
    failure: String,
    e_b: f64,
    e_bt: f64,
    e_bv: f64,
    e_t: f64,
    e_v: f64,
    acc_b: f64,
    acc_bt: f64,
    acc_bv: f64,
    acc_t: f64,
    acc_v: f64,
    presentations: u64,
    optimizer_steps: u64,
    pretrain_losses: String,
    finetune_losses: String,
}

fn join_trace(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn split_trace(text: &str) -> Result<Vec<f64>, ProtocolError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|v| {
            v.parse()
                .map_err(|_| ProtocolError::Invalid(format!("bad trace value {v:?}")))
        })
        .collect()
}

impl From<&MetricsRecord> for RunRow {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            b: r.b,
            subset_id: r.subset_id,
            subset_size: r.subset_size,
            failed: r.failure.is_some(),
            failure: r.failure.clone().unwrap_or_default(),
            e_b: r.subset_pre.loss,
            e_bt: r.train_pre.loss,
            e_bv: r.valid_pre.loss,
            e_t: r.train_ft.loss,
            e_v: r.valid_ft.loss,
            acc_b: r.subset_pre.accuracy,
            acc_bt: r.train_pre.accuracy,
            acc_bv: r.valid_pre.accuracy,
            acc_t: r.train_ft.accuracy,
            acc_v: r.valid_ft.accuracy,
            presentations: r.presentations,
            optimizer_steps: r.optimizer_steps,
            pretrain_losses: join_trace(&r.pretrain_losses),
            finetune_losses: join_trace(&r.finetune_losses),
        }
    }
}

impl TryFrom<RunRow> for MetricsRecord {
    type Error = ProtocolError;

    fn try_from(r: RunRow) -> Result<Self, ProtocolError> {
        let pt = |loss, accuracy| Point { loss, accuracy };
        Ok(Self {
            b: r.b,
            subset_id: r.subset_id,
            subset_size: r.subset_size,
            failure: r.failed.then_some(r.failure),
            subset_pre: pt(r.e_b, r.acc_b),
            train_pre: pt(r.e_bt, r.acc_bt),
            valid_pre: pt(r.e_bv, r.acc_bv),
            train_ft: pt(r.e_t, r.acc_t),
            valid_ft: pt(r.e_v, r.acc_v),
            pretrain_losses: split_trace(&r.pretrain_losses)?,
            finetune_losses: split_trace(&r.finetune_losses)?,
            presentations: r.presentations,
            optimizer_steps: r.optimizer_steps,
        })
    }
}

pub fn write_runs_csv(records: &[MetricsRecord], path: &Path) -> Result<(), ProtocolError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(RunRow::from(r))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<MetricsRecord>, ProtocolError> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize::<RunRow>()
        .map(|row| MetricsRecord::try_from(row?))
        .collect()
}

fn aggregate_header() -> Vec<String> {
    let mut h: Vec<String> = ["b", "fraction", "runs", "failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(SERIES.iter().map(|s| s.to_string()));
    h.extend(SERIES.iter().map(|s| format!("acc_{s}")));
    h.extend(
        ["q", "subset_q", "q_unity_fraction"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn write_aggregate_csv(curves: &[AggregateCurve], path: &Path) -> Result<(), ProtocolError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(aggregate_header())?;
    for c in curves {
        let mut row = vec![
            c.b.to_string(),
            c.fraction.to_string(),
            c.runs.to_string(),
            c.failed.to_string(),
        ];
        row.extend(c.mean.iter().map(|p| p.loss.to_string()));
        row.extend(c.mean.iter().map(|p| p.accuracy.to_string()));
        row.extend([
            c.q.to_string(),
            c.subset_q.to_string(),
            c.q_unity_fraction.to_string(),
        ]);
        w.write_record(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), ProtocolError> {
    fs::write(path, text).map_err(io_err(path))
}

fn series_tsv(curves: &[AggregateCurve], pick: impl Fn(&Point) -> f64) -> String {
    let mut out = format!("log2_fraction\tfraction\t{}\n", SERIES.join("\t"));
    // descending b = ascending fraction, the plotting order
    for c in curves.iter().rev() {
        let cols: Vec<String> = c.mean.iter().map(|p| pick(p).to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            c.fraction.log2(),
            c.fraction,
            cols.join("\t")
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: String,
    pub master_seed: u64,
    pub partition_seed: u64,
    pub network_seed: u64,
    pub k: usize,
    pub m: usize,
    pub p: usize,
    pub q: f64,
    pub q_unity_fraction: f64,
    pub records: usize,
    pub failed: usize,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, grid: &GridResult) -> Result<Self, ProtocolError> {
        Ok(Self {
            config_hash: cfg.hash.clone(),
            config: cfg.canonical.clone(),
            master_seed: cfg.master_seed,
            partition_seed: SeededRng::derive_child(cfg.master_seed, PARTITION_LABEL),
            network_seed: cfg.master_seed,
            k: grid.k,
            m: grid.m,
            p: grid.p,
            q: overdetermination_ratio(grid.k, grid.m, grid.p)?,
            q_unity_fraction: q_unity_fraction(grid.k, grid.m, grid.p),
            records: grid.records.len(),
            failed: grid.records.iter().filter(|r| !r.is_ok()).count(),
        })
    }
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub runs: PathBuf,
    pub aggregate: PathBuf,
    pub plot_loss: PathBuf,
    pub plot_accuracy: PathBuf,
    pub plot_q_unity: PathBuf,
    pub plot_cost: PathBuf,
    pub manifest: Option<PathBuf>,
}

/// Writes `runs.csv`, `aggregate.csv`, and `plotdata/*.tsv` (plus
/// `manifest.json` when given). Reruns overwrite with identical bytes.
pub fn emit_report(
    records: &[MetricsRecord],
    curves: &[AggregateCurve],
    out_dir: &Path,
    manifest: Option<&Manifest>,
) -> Result<ReportPaths, ProtocolError> {
    if records.is_empty() {
        return Err(ProtocolError::Invalid("no records to report".into()));
    }
    let plot_dir = out_dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(io_err(&plot_dir))?;
    let paths = ReportPaths {
        runs: out_dir.join("runs.csv"),
        aggregate: out_dir.join("aggregate.csv"),
        plot_loss: plot_dir.join("loss.tsv"),
        plot_accuracy: plot_dir.join("accuracy.tsv"),
        plot_q_unity: plot_dir.join("q_unity.tsv"),
        plot_cost: plot_dir.join("cost.tsv"),
        manifest: manifest.map(|_| out_dir.join("manifest.json")),
    };
    write_runs_csv(records, &paths.runs)?;
    write_aggregate_csv(curves, &paths.aggregate)?;
    write_text(&paths.plot_loss, &series_tsv(curves, |p| p.loss))?;
    write_text(&paths.plot_accuracy, &series_tsv(curves, |p| p.accuracy))?;
    let mut q_text = String::from("log2_fraction\tq_unity_fraction\n");
    if let Some(c) = curves.first() {
        q_text.push_str(&format!(
            "{}\t{}\n",
            c.q_unity_fraction.log2(),
            c.q_unity_fraction
        ));
    }
    write_text(&paths.plot_q_unity, &q_text)?;
    let mut cost = String::from("b\tfraction\tmean_presentations\tpercent_of_baseline\n");
    let mean_cost = |b: usize| {
        let rs: Vec<u64> = records
            .iter()
            .filter(|r| r.b == b)
            .map(|r| r.presentations)
            .collect();
        rs.iter().sum::<u64>() as f64 / rs.len().max(1) as f64
    };
    let base = mean_cost(1);
    for c in curves.iter().rev() {
        let v = mean_cost(c.b);
        let pct = if base > 0.0 {
            100.0 * v / base
        } else {
            f64::NAN
        };
        cost.push_str(&format!("{}\t{}\t{}\t{}\n", c.b, c.fraction, v, pct));
    }
    write_text(&paths.plot_cost, &cost)?;
    if let (Some(m), Some(path)) = (manifest, &paths.manifest) {
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        write_text(path, &text)?;
    }
    Ok(paths)
}
