//! `subpre`: batch driver for subset pretraining experiments.
//!
//! Exit codes: 0 success, 1 check failed, 2 configuration or usage error,
//! 3 data error, 4 every run diverged, 5 output I/O error. Failures print a
//! single JSON line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use subpre::config::{ConfigMap, DatasetSource, ExperimentConfig};
use subpre::data::{synthesize_dataset, synthesize_validation, write_idx, IDX_CLASSES};
use subpre::network::{
    gradient_check_against, parameter_count, Batch, Network, NetworkError, NetworkSpec,
};
use subpre::protocol::{
    aggregate, emit_report, overdetermination_ratio, q_unity_fraction, read_runs_csv,
    relative_cost, run_full_grid, Manifest, SERIES,
};
use subpre::{ConfigError, ProtocolError, SeededRng, Tensor};

const MAX_CHECK_PARAMS: usize = 5000;
const CHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const REPORT_DIVISORS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

#[derive(Parser)]
#[command(name = "subpre", version, about = "Subset pretraining experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; applied after the config file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for the run grid.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the baseline and every subset run, then write the report.
    Run,
    /// Rebuild aggregate.csv and plotdata/ from an existing runs.csv.
    Report,
    /// Finite-difference audit of the network gradient.
    CheckGrad {
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_layer: usize,
        /// Examples in the probe batch.
        #[arg(long, default_value_t = 6)]
        samples: usize,
        /// Perturb the analytic gradient before comparing (fault injection).
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Print the overdetermination ratio for the whole set and each subset.
    CheckQ {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
    },
    /// Write the configured synthetic dataset as IDX files.
    Synth,
}

#[derive(Debug)]
enum Failure {
    Check(String),
    Config(String),
    Data(String),
    Diverged(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
            Failure::Io(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Check(_) => "check_failed",
            Failure::Config(_) => "config",
            Failure::Data(_) => "data",
            Failure::Diverged(_) => "diverged",
            Failure::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m)
            | Failure::Config(m)
            | Failure::Data(m)
            | Failure::Diverged(m)
            | Failure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Io(_) | NetworkError::ParamFile(_) => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Data(_) => Failure::Data(e.to_string()),
            ProtocolError::Network(n) => n.into(),
            ProtocolError::Invalid(_) | ProtocolError::Optim(_) => Failure::Config(e.to_string()),
            ProtocolError::Io { .. } | ProtocolError::Csv(_) | ProtocolError::Json(_) => {
                Failure::Io(e.to_string())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = json!({ "error": f.kind(), "code": f.code(), "message": f.message() });
            eprintln!("{line}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let map = load_map(&cli.common)?;
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            return Err(Failure::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Run => cmd_run(&map),
        Command::Report => cmd_report(&map),
        Command::CheckGrad {
            per_layer,
            samples,
            corrupt_gradient,
        } => {
            let explicit = cli.common.config.is_some() || !cli.common.overrides.is_empty();
            cmd_check_grad(&map, explicit, *per_layer, *samples, *corrupt_gradient)
        }
        Command::CheckQ { k, m, p } => cmd_check_q(&map, *k, *m, *p),
        Command::Synth => cmd_synth(&map),
    }
}

/// Defaults, then the config file, then each `--set`, then `--out`.
fn load_map(common: &Common) -> Result<ConfigMap, Failure> {
    let mut map = match &common.config {
        Some(path) => ConfigMap::from_file(path)?,
        None => ConfigMap::default(),
    };
    for pair in &common.overrides {
        map.set_pair(pair)?;
    }
    if let Some(out) = &common.out {
        map.set("output.dir", &out.display().to_string())?;
    }
    Ok(map)
}

fn cmd_run(map: &ConfigMap) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_map(map)?;
    let grid = run_full_grid(&cfg)?;
    let manifest = Manifest::new(&cfg, &grid)?;
    let paths = emit_report(
        &grid.records,
        &grid.curves,
        &cfg.output_dir,
        Some(&manifest),
    )?;
    println!("K={} M={} P={} Q={:.4}", grid.k, grid.m, grid.p, manifest.q);
    println!("b\truns\tfailed\t{}\tsubset_q", SERIES.join("\t"));
    for c in &grid.curves {
        let losses: Vec<String> = c.mean.iter().map(|p| format!("{:.6}", p.loss)).collect();
        println!(
            "{}\t{}\t{}\t{}\t{:.4}",
            c.b,
            c.runs,
            c.failed,
            losses.join("\t"),
            c.subset_q
        );
    }
    println!("wrote {}", paths.runs.display());
    if grid.all_failed() {
        return Err(Failure::Diverged(format!(
            "all {} runs failed; see {}",
            grid.records.len(),
            paths.runs.display()
        )));
    }
    Ok(())
}

fn cmd_report(map: &ConfigMap) -> Result<(), Failure> {
    let out = PathBuf::from(map.get("output.dir"));
    let manifest_path = out.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Failure::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("{}: {e}", manifest_path.display())))?;
    let field = |name: &str| {
        manifest[name]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Failure::Data(format!("{}: missing {name}", manifest_path.display())))
    };
    let (k, m, p) = (field("k")?, field("m")?, field("p")?);
    let records = read_runs_csv(&out.join("runs.csv")).map_err(|e| Failure::Data(e.to_string()))?;
    let curves = aggregate(&records, k, m, p)?;
    let paths = emit_report(&records, &curves, &out, None)?;
    println!(
        "wrote {} and {}",
        paths.aggregate.display(),
        paths.plot_loss.parent().unwrap_or(&out).display()
    );
    Ok(())
}

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: (4, 4, 1),
        conv_filters: vec![2],
        hidden_units: 4,
        class_count: 3,
        master_seed: 0,
    }
}

fn cmd_check_grad(
    map: &ConfigMap,
    use_config: bool,
    per_layer: usize,
    samples: usize,
    corrupt: bool,
) -> Result<(), Failure> {
    let (spec, seed) = if use_config {
        let cfg = ExperimentConfig::from_map(map)?;
        (cfg.network_spec(), cfg.master_seed)
    } else {
        (tiny_spec(), 0)
    };
    let p = parameter_count(&spec)?;
    if p > MAX_CHECK_PARAMS {
        return Err(Failure::Config(format!(
            "gradient check needs P <= {MAX_CHECK_PARAMS}, spec has P = {p}"
        )));
    }
    if samples == 0 || per_layer == 0 {
        return Err(Failure::Config(
            "--samples and --per-layer must be positive".into(),
        ));
    }
    let net = Network::build(&spec)?;
    let (h, w, c) = spec.input_shape;
    let mut rng = SeededRng::new(SeededRng::derive_child(seed, 0x4752_4144));
    let values = (0..samples * h * w * c).map(|_| rng.next_f64()).collect();
    let labels = (0..samples)
        .map(|_| (rng.next_u64() % spec.class_count as u64) as usize)
        .collect();
    let images = Tensor::from_vec(&[samples, h, w, c], values)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let batch = Batch::new(images, labels)?;

    let mut coords = Vec::new();
    for slot in net.slots() {
        let range = slot.range();
        if range.len() <= per_layer {
            coords.extend(range);
        } else {
            let mut picked: Vec<usize> = Vec::with_capacity(per_layer);
            while picked.len() < per_layer {
                let i = range.start + (rng.next_u64() % range.len() as u64) as usize;
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            picked.sort_unstable();
            coords.extend(picked);
        }
    }

    let (_, grad) = net.loss_and_gradient(&batch)?;
    let mut analytic = grad.into_values();
    if corrupt {
        for g in &mut analytic {
            *g = 1.5 * *g + 1e-2;
        }
    }
    let report = gradient_check_against(&net, &batch, &analytic, &coords, FD_STEP)?;
    println!(
        "spec {}  P={p}  probes={}",
        spec.canonical(),
        report.probes.len()
    );
    println!("slot\tindex\tanalytic\tnumeric\trelative_error");
    for probe in report.worst_per_slot() {
        println!(
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.3e}",
            probe.slot, probe.index, probe.analytic, probe.numeric, probe.relative_error
        );
    }
    println!("max_relative_error {:.3e}", report.max_relative_error);
    if report.max_relative_error < CHECK_TOLERANCE {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::Check(format!(
            "max relative error {:.3e} is not below {CHECK_TOLERANCE:e}",
            report.max_relative_error
        )))
    }
}

fn cmd_check_q(
    map: &ConfigMap,
    k: Option<usize>,
    m: Option<usize>,
    p: Option<usize>,
) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_map(map)?;
    let (nominal_k, nominal_m) = cfg.nominal_k_m();
    let k = k.unwrap_or(nominal_k);
    let m = m.unwrap_or(nominal_m);
    let p = match p {
        Some(p) => p,
        None => parameter_count(&cfg.network_spec())?,
    };
    let q = overdetermination_ratio(k, m, p)?;
    println!("K {k}");
    println!("M {m}");
    println!("P {p}");
    println!("Q {q:.6}");
    println!("q_unity_fraction {:.6}", q_unity_fraction(k, m, p));
    println!("b\tsubset_k\tsubset_q\tstatus");
    for b in REPORT_DIVISORS {
        let subset_k = k / b;
        let subset_q = (subset_k * m) as f64 / p as f64;
        let status = if subset_q > 1.0 {
            "overdetermined"
        } else if subset_q < 1.0 {
            "underdetermined"
        } else {
            "boundary"
        };
        println!("{b}\t{subset_k}\t{subset_q:.6}\t{status}");
    }
    let epochs_pre = cfg.epochs_pre;
    let epochs_ft = cfg.epochs_ft;
    println!("cost_percent_of_baseline (epochs {epochs_pre}/{epochs_ft})");
    for b in REPORT_DIVISORS {
        println!("{b}\t{:.3}", relative_cost(b, epochs_pre, epochs_ft, k));
    }
    Ok(())
}

fn cmd_synth(map: &ConfigMap) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_map(map)?;
    let DatasetSource::Synthetic {
        train,
        validation,
        classes,
        height,
        width,
        channels,
        difficulty,
        seed,
    } = cfg.dataset
    else {
        return Err(Failure::Config(
            "synth needs dataset.kind = synthetic".into(),
        ));
    };
    if channels != 1 || classes > IDX_CLASSES {
        return Err(Failure::Config(format!(
            "IDX output needs one channel and at most {IDX_CLASSES} classes"
        )));
    }
    let data_err = |e: subpre::DataError| Failure::Data(e.to_string());
    let tr = synthesize_dataset(train, classes, height, width, channels, seed, difficulty)
        .map_err(data_err)?;
    let va = synthesize_validation(
        validation, classes, height, width, channels, seed, difficulty,
    )
    .map_err(data_err)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let write = |ds, images: &str, labels: &str| -> Result<(), Failure> {
        write_idx(ds, &dir.join(images), &dir.join(labels)).map_err(|e| Failure::Io(e.to_string()))
    };
    write(&tr, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    write(&va, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    println!(
        "wrote {} training and {} validation images ({height}x{width}) to {}",
        tr.len(),
        va.len(),
        dir.display()
    );
    Ok(())
}
