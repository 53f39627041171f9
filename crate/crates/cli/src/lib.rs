//! `ddnet` command-line front end.
//!
//! Every command takes an optional JSON config (`--config`), dotted-path
//! overrides (`--set fed.delta=0.6`) and writes under the config's
//! `output_dir`:
//!
//! ```text
//! <out>/data/client_NNN.bin, pooled.bin, manifest.json     gen-data
//! <out>/{cl,fedave,fedgs}/bundle/, log.jsonl, summary.json  train-*
//! <out>/{fedave,fedgs}/ledger.json                          train-fedave / train-fedgs
//! <out>/eval/<run>_<axis>.csv / .json                       eval
//! <out>/summary.txt, summary.json                           report
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ddnet_core::config::{ExperimentConfig, TrainingMode};
use ddnet_core::detectors::{write_ber_csv, BerReport, ConditionAxis};
use ddnet_core::federated::{self, OverheadLedger};
use ddnet_core::io::{self, JsonLines};
use ddnet_core::numerics::ParamSet;
use ddnet_core::pipeline;
use ddnet_core::{ClientProfile, DdNetModel, Dataset, Provenance};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ddnet", version, about = "Dynamic-routing MIMO detection: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value by dotted path, e.g. `model.k_id=5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Snr,
    Nr,
    Rho,
    Mixed,
}

impl From<Axis> for ConditionAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Snr => ConditionAxis::SnrDb,
            Axis::Nr => ConditionAxis::NR,
            Axis::Rho => ConditionAxis::Rho,
            Axis::Mixed => ConditionAxis::Mixed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate client datasets and their pooled shuffle.
    GenData(ConfigArgs),
    /// Centralized training of IDetNet, OAMPNet and RouteNet.
    TrainCl(ConfigArgs),
    /// Federated training with parameter averaging.
    TrainFedave(ConfigArgs),
    /// Federated training with sparsified gradient uploads.
    TrainFedgs {
        #[command(flatten)]
        config: ConfigArgs,
        /// Sparsity (shorthand for `--set fed.delta=...`).
        #[arg(long)]
        delta: Option<f64>,
    },
    /// BER sweep of LMMSE, IDetNet, OAMPNet, DDNet (and ML) for a trained bundle.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bundle directory; defaults to `<out>/<mode>/bundle`.
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "snr")]
        axis: Axis,
    },
    /// Merge evaluation reports and ledgers of a run directory into one summary.
    Report {
        #[arg(value_name = "RUN_DIR")]
        run_dir: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&load_config(&a, &[])?),
        Command::TrainCl(a) => train_cl(&load_config(&a, &[("mode", json!("cl"))])?),
        Command::TrainFedave(a) => train_federated(&load_config(&a, &[("mode", json!("fedave"))])?),
        Command::TrainFedgs { config, delta } => {
            let mut extra = vec![("mode", json!("fedgs"))];
            if let Some(d) = delta {
                extra.push(("fed.delta", json!(d)));
            }
            train_federated(&load_config(&config, &extra)?)
        }
        Command::Eval { config, bundle, axis } => eval(&load_config(&config, &[])?, bundle.as_deref(), axis.into()),
        Command::Report { run_dir } => report(&run_dir).map(|_| ()),
    }
}

/// Sets `path` (dot-separated) inside a JSON object tree.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed config path `{path}`");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| anyhow!("`{path}`: `{key}` is not inside an object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("`{path}`: parent is not an object"))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Config file (or defaults) + command-implied values + `--set` + shorthand flags.
pub fn load_config(args: &ConfigArgs, implied: &[(&str, Value)]) -> Result<ExperimentConfig> {
    let mut value: Value = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => json!({}),
    };
    if !value.is_object() {
        bail!("config must be a JSON object");
    }
    for (k, v) in implied {
        set_path(&mut value, k, v.clone())?;
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not PATH=VALUE"))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k.trim(), v)?;
    }
    if let Some(s) = args.seed {
        set_path(&mut value, "seed", json!(s))?;
    }
    if let Some(d) = &args.output_dir {
        set_path(&mut value, "output_dir", json!(d))?;
    }
    ExperimentConfig::from_json(&value.to_string()).context("invalid configuration")
}

fn mode_name(mode: TrainingMode) -> &'static str {
    match mode {
        TrainingMode::Cl => "cl",
        TrainingMode::Fedave => "fedave",
        TrainingMode::Fedgs => "fedgs",
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub file: String,
    pub count: usize,
    pub profile: Option<ClientProfile>,
}

/// `<out>/data/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub n_t: usize,
    pub clients: Vec<ClientEntry>,
    pub pooled: String,
    pub pooled_count: usize,
    pub config: ExperimentConfig,
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = data_dir(cfg);
    create_dir(&dir)?;
    let (clients, pooled) = pipeline::generate_data(cfg)?;
    let cfg_value = serde_json::to_value(cfg)?;
    let mut entries = Vec::with_capacity(clients.len());
    for (c, d) in clients.iter().enumerate() {
        let file = format!("client_{c:03}.bin");
        io::write_dataset(&dir.join(&file), d, Some(cfg.seed), cfg_value.clone())?;
        let profile = match &d.provenance {
            Provenance::Client(p) => Some(p.clone()),
            _ => None,
        };
        entries.push(ClientEntry { file, count: d.len(), profile });
    }
    io::write_dataset(&dir.join("pooled.bin"), &pooled, Some(cfg.seed), cfg_value)?;
    let manifest = DataManifest {
        seed: cfg.seed,
        n_t: cfg.system.n_t,
        clients: entries,
        pooled: "pooled.bin".into(),
        pooled_count: pooled.len(),
        config: cfg.clone(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {} client datasets and {} pooled samples to {}", clients.len(), pooled.len(), dir.display());
    Ok(())
}

fn read_manifest(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let path = data_dir(cfg).join("manifest.json");
    let m: DataManifest = io::read_json(&path).with_context(|| "no generated data; run `ddnet gen-data` first")?;
    if m.n_t != cfg.system.n_t {
        bail!("data in {} has N_t = {}, config has {}", path.display(), m.n_t, cfg.system.n_t);
    }
    Ok(m)
}

fn open_log(path: &Path) -> Result<JsonLines> {
    Ok(JsonLines::create(path)?)
}

/// Log sink that keeps the first write error.
fn log_sink<'a>(log: &'a mut JsonLines, failure: &'a mut Option<io::IoError>) -> impl FnMut(Value) + Send + 'a {
    move |v: Value| {
        if failure.is_none() {
            if let Err(e) = log.write(&v) {
                *failure = Some(e);
            }
        }
    }
}

pub fn train_cl(cfg: &ExperimentConfig) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let pooled = io::read_dataset(&data_dir(cfg).join(&manifest.pooled))?;
    let dir = cfg.output_dir.join("cl");
    create_dir(&dir)?;
    io::write_json(&dir.join("config.json"), cfg)?;
    let mut log = open_log(&dir.join("log.jsonl"))?;
    let mut failure = None;
    let out = {
        let mut sink = log_sink(&mut log, &mut failure);
        pipeline::run_cl(cfg, &pooled.samples, &mut sink)?
    };
    if let Some(e) = failure {
        return Err(e.into());
    }
    io::save_bundle(&dir.join("bundle"), &out.model)?;
    let route_all: Vec<_> = out.route_train.iter().chain(&out.route_holdout).cloned().collect();
    io::write_route_dataset(&dir.join("route_dataset.bin"), cfg.system.n_t, &route_all, json!({ "seed": cfg.seed }))?;
    let accuracy = ddnet_core::ddnet::route_accuracy(&out.model.routenet, &out.model.stats, &out.route_holdout);
    let summary = json!({
        "mode": "cl",
        "samples": pooled.len(),
        "route_counts_before_balance": out.route_counts,
        "route_train": out.route_train.len(),
        "route_holdout": out.route_holdout.len(),
        "route_holdout_accuracy": accuracy,
        "idetnet_epochs": out.idetnet_history.len(),
        "final_idetnet_val_loss": out.idetnet_history.last().and_then(|s| s.val_loss),
        "transmission_bits": federated::t_cl(&pooled.samples, cfg.fed.bits),
    });
    io::write_json(&dir.join("summary.json"), &summary)?;
    println!("centralized training done: bundle in {}", dir.join("bundle").display());
    Ok(())
}

/// `<out>/<mode>/ledger.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub mode: String,
    pub ledger: OverheadLedger,
    pub q_idetnet: u64,
    pub q_routenet: u64,
    /// Closed-form FedAve total for the configured budgets.
    pub t_fedave: u64,
    /// Expected FedGS total at the configured δ.
    pub t_fedgs: f64,
    /// Bits to ship every client dataset to a server.
    pub t_cl: u64,
}

pub fn train_federated(cfg: &ExperimentConfig) -> Result<()> {
    let manifest = read_manifest(cfg)?;
    let clients: Vec<Dataset> = manifest
        .clients
        .iter()
        .map(|e| io::read_dataset(&data_dir(cfg).join(&e.file)))
        .collect::<Result<_, _>>()?;
    if clients.len() != cfg.fed.total_clients {
        bail!("config expects {} clients, data has {}", cfg.fed.total_clients, clients.len());
    }
    let name = mode_name(cfg.mode);
    let dir = cfg.output_dir.join(name);
    create_dir(&dir)?;
    io::write_json(&dir.join("config.json"), cfg)?;
    let mut log = open_log(&dir.join("log.jsonl"))?;
    let mut failure = None;
    let out = {
        let mut sink = log_sink(&mut log, &mut failure);
        pipeline::run_federated(cfg, &clients, &mut sink)?
    };
    if let Some(e) = failure {
        return Err(e.into());
    }
    io::save_bundle(&dir.join("bundle"), &out.model)?;
    let (q_id, q_ro) = (out.model.idetnet.param_len() as u64, out.model.routenet.param_len() as u64);
    let all: Vec<_> = clients.iter().flat_map(|d| d.samples.iter().cloned()).collect();
    let ledger = LedgerReport {
        mode: name.into(),
        ledger: out.ledger,
        q_idetnet: q_id,
        q_routenet: q_ro,
        t_fedave: federated::t_fedave(&cfg.fed, q_id, q_ro),
        t_fedgs: federated::t_fedgs(&cfg.fed, q_id, q_ro),
        t_cl: federated::t_cl(&all, cfg.fed.bits),
    };
    io::write_json(&dir.join("ledger.json"), &ledger)?;
    io::write_json(&dir.join("summary.json"), &json!({ "mode": name, "epochs": out.records.len() }))?;
    println!("{name} training done: bundle in {}, {} bits moved", dir.join("bundle").display(), ledger.ledger.total());
    Ok(())
}

fn check_bundle(cfg: &ExperimentConfig, model: &DdNetModel) -> Result<()> {
    if model.idetnet_config != cfg.idetnet() {
        bail!("checkpoint/config mismatch: bundle IDetNet {:?}, config {:?}", model.idetnet_config, cfg.idetnet());
    }
    if model.oampnet_config != cfg.oampnet() {
        bail!("checkpoint/config mismatch: bundle OAMPNet {:?}, config {:?}", model.oampnet_config, cfg.oampnet());
    }
    Ok(())
}

/// `<out>/eval/<run>_<axis>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub run: String,
    pub bundle: PathBuf,
    pub axis: ConditionAxis,
    pub seed: u64,
    pub reports: Vec<BerReport>,
}

pub fn eval(cfg: &ExperimentConfig, bundle: Option<&Path>, axis: ConditionAxis) -> Result<()> {
    let bundle = bundle.map_or_else(|| cfg.output_dir.join(mode_name(cfg.mode)).join("bundle"), Path::to_path_buf);
    let model = io::load_bundle(&bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    check_bundle(cfg, &model)?;
    let run = bundle
        .parent()
        .and_then(Path::file_name)
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    let seed = cfg.seed.wrapping_add(1_000_003);
    let points = pipeline::sweep_points(cfg, axis, seed)?;
    let reports = pipeline::evaluate_model(&model, cfg.eval.include_ml, axis, &points, seed)?;
    let dir = cfg.output_dir.join("eval");
    create_dir(&dir)?;
    let stem = dir.join(format!("{run}_{axis}"));
    let csv_path = stem.with_extension("csv");
    let file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_ber_csv(&reports, file).with_context(|| format!("writing {}", csv_path.display()))?;
    io::write_json(&stem.with_extension("json"), &EvalFile { run, bundle, axis, seed, reports })?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// One BER row of the merged summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub axis: String,
    pub detector: String,
    pub condition: f64,
    pub ber: f64,
    pub avg_flops: f64,
    pub branch1_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub ledgers: Vec<LedgerReport>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.retain(|p| p.extension().is_some_and(|e| e == ext));
    out.sort();
    Ok(out)
}

/// Writes `summary.txt` and `summary.json` into `run_dir` and returns the summary.
pub fn report(run_dir: &Path) -> Result<Summary> {
    if !run_dir.is_dir() {
        bail!("run directory {} does not exist", run_dir.display());
    }
    let mut rows = Vec::new();
    for path in sorted_files(&run_dir.join("eval"), "json")? {
        let f: EvalFile = io::read_json(&path)?;
        for r in &f.reports {
            for p in &r.points {
                rows.push(SummaryRow {
                    run: f.run.clone(),
                    axis: f.axis.to_string(),
                    detector: r.detector.clone(),
                    condition: p.condition,
                    ber: p.ber,
                    avg_flops: p.avg_flops,
                    branch1_fraction: p.branch_counts.map(|c| c[1] as f64 / p.samples as f64),
                });
            }
        }
    }
    let mut ledgers = Vec::new();
    for mode in ["fedave", "fedgs"] {
        let path = run_dir.join(mode).join("ledger.json");
        if path.exists() {
            ledgers.push(io::read_json::<LedgerReport>(&path)?);
        }
    }
    if rows.is_empty() && ledgers.is_empty() {
        bail!("nothing to report in {}: no eval reports or ledgers", run_dir.display());
    }

    let mut text = String::new();
    let mut current = (String::new(), String::new());
    for r in &rows {
        if (r.run.clone(), r.axis.clone()) != current {
            current = (r.run.clone(), r.axis.clone());
            writeln!(text, "\n== {} / {}", r.run, r.axis)?;
            writeln!(text, "{:<10} {:>10} {:>12} {:>12} {:>10}", "detector", "condition", "ber", "avg_flops", "branch1")?;
        }
        let frac = r.branch1_fraction.map_or("-".to_string(), |f| format!("{f:.3}"));
        writeln!(text, "{:<10} {:>10} {:>12.4e} {:>12.0} {:>10}", r.detector, r.condition, r.ber, r.avg_flops, frac)?;
    }
    for l in &ledgers {
        writeln!(text, "\n== {} transmission", l.mode)?;
        writeln!(
            text,
            "broadcast {} upload {} index {} total {} bits (closed-form fedave {}, expected fedgs {:.0}, centralized data {})",
            l.ledger.bits_broadcast,
            l.ledger.bits_upload,
            l.ledger.bits_index,
            l.ledger.total(),
            l.t_fedave,
            l.t_fedgs,
            l.t_cl
        )?;
    }
    let text = text.trim_start().to_string();
    fs::write(run_dir.join("summary.txt"), &text).with_context(|| "writing summary.txt")?;
    let summary = Summary { rows, ledgers };
    io::write_json(&run_dir.join("summary.json"), &summary)?;
    print!("{text}");
    Ok(summary)
}
