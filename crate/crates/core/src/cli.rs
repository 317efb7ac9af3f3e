//! Command-line front end: case inspection, dataset generation, training,
//! evaluation and batch inference.
//!
//! Every command reads a [`RunConfig`], built from a named preset, an
//! optional TOML file layered on top, and finally command-line flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cases;
use crate::dataset::{self, DatasetError};
use crate::evalkit::{evaluate, EvalConfig, EvalError, OraclePassThrough, VoltageSource};
use crate::netmodel::{parse_case, Network};
use crate::nnet::{self, NnetError, TrainConfig, TrainLog, VoltagePredictor};
use crate::oracle::SolverConfig;
use crate::recon::{correction_model_at, post_process, reconstruct, PostProcessConfig, PpMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Solver(m) => f.write_str(m),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::TooFewConverged { .. } => CliError::Solver(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnetError> for CliError {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::Dataset(d) => d.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub sampling: u64,
    pub split: u64,
    /// Drives both weight initialization and minibatch shuffling, on
    /// separate streams.
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            sampling: 1,
            split: 2,
            train: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Path to a MATPOWER or JSON case file, or a bundled case name.
    pub case: Option<String>,
    pub seeds: Seeds,
    pub samples: usize,
    pub variation: f64,
    pub train_fraction: f64,
    /// Unset means size-dependent defaults; an empty list trains affine maps.
    pub hidden_dims: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub post_process: PostProcessConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("paper-protocol").expect("built-in preset")
    }
}

pub const PRESETS: [&str; 2] = ["paper-protocol", "desk"];

impl RunConfig {
    pub fn preset(name: &str) -> Option<RunConfig> {
        let paper = RunConfig {
            case: None,
            seeds: Seeds::default(),
            samples: 40_000,
            variation: 0.1,
            train_fraction: 0.8,
            hidden_dims: None,
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            post_process: PostProcessConfig::default(),
            output: PathBuf::from("runs"),
        };
        match name {
            "paper-protocol" => Some(paper),
            "desk" => Some(RunConfig {
                samples: 2_000,
                hidden_dims: Some(Vec::new()),
                train: TrainConfig {
                    max_epochs: 300,
                    final_learning_rate: Some(1e-6),
                    standardize_targets: true,
                    ..paper.train
                },
                ..paper
            }),
            _ => None,
        }
    }

    /// Preset values overlaid with whatever keys the TOML text sets.
    pub fn layered(preset: &str, toml_text: Option<&str>) -> Result<RunConfig, CliError> {
        let base = RunConfig::preset(preset)
            .ok_or_else(|| CliError::Usage(format!("unknown preset '{preset}' (known: {})", PRESETS.join(", "))))?;
        let Some(text) = toml_text else {
            return Ok(base);
        };
        let overlay: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        merge(&mut merged, overlay);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(0.0..1.0).contains(&self.variation) {
            return Err(CliError::Usage(format!("variation must lie in [0, 1), got {}", self.variation)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Usage(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.samples == 0 {
            return Err(CliError::Usage("samples must be at least 1".into()));
        }
        self.solver.validate().map_err(CliError::Usage)?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridvolt", version, about = "Voltage-prediction surrogate for AC optimal power flow")]
pub struct Cli {
    /// TOML run configuration layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named default set: paper-protocol or desk.
    #[arg(long, global = true, default_value = "paper-protocol")]
    pub preset: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print bus, generator and branch counts of a case.
    CaseInfo {
        /// Case file or bundled name (case14, case30, case118).
        case: String,
        #[arg(long)]
        json: bool,
    },
    /// Sample load scenarios, solve each with the built-in OPF and write a dataset directory.
    GenDataset(GenArgs),
    /// Train the magnitude and angle predictors on a dataset.
    Train(TrainArgs),
    /// Score a model on the test split and write report.md/json/csv.
    Evaluate(EvalArgs),
    /// Predict operating points for a scenario CSV.
    Infer(InferArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct CaseArg {
    /// Case file or bundled name; overrides `case` from the config.
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Output directory [default: <output>/dataset].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub variation: Option<f64>,
    #[arg(long)]
    pub sampling_seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Solver tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Use loads from this CSV (`pd_<bus>`, `qd_<bus>` columns) instead of sampling.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Solve scenarios on all cores. Recorded per-sample oracle times then
    /// include contention, which distorts speedup figures.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Dataset directory [default: <output>/dataset].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model file [default: <output>/model.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch loss CSV [default: next to the model, `.loss.csv`].
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden layer widths, comma separated, or `none` for affine maps.
    #[arg(long, value_parser = parse_hidden)]
    pub hidden: Option<HiddenDims>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bus_groups: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report directory [default: <output>/report].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Post-processing modes to report, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "off,historical,exact")]
    pub pp: Vec<PpMode>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Score the oracle's own labels instead of a model.
    #[arg(long)]
    pub oracle_pass_through: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Solution CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Apply the correction step to each prediction.
    #[arg(long)]
    pub post_process: bool,
    #[arg(long)]
    pub pp_mode: Option<PpMode>,
    #[arg(long)]
    pub rounds: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let mut stdout = std::io::stdout();
    match execute(&cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut cfg = RunConfig::layered(&cli.preset, text.as_deref())?;
    let emit = |out: &mut dyn std::io::Write, s: &str| out.write_all(s.as_bytes()).map_err(|e| CliError::Data(e.to_string()));
    match &cli.command {
        Command::CaseInfo { case, json } => {
            let net = load_case(case)?;
            emit(out, &case_info(&net, *json))
        }
        Command::ShowConfig => emit(out, &cfg.to_toml()),
        Command::GenDataset(a) => {
            apply_gen(&mut cfg, a);
            cfg.validate()?;
            let net = config_case(&cfg, &a.case)?;
            let dir = a.out.clone().unwrap_or_else(|| cfg.output.join("dataset"));
            let scenarios = match &a.scenarios {
                Some(p) => Some(fs::read_to_string(p).map_err(|e| io_err(p, e))?),
                None => None,
            };
            let ds = cmd_gen_dataset(&net, &cfg, scenarios.as_deref(), a.parallel, &dir)?;
            emit(
                out,
                &format!(
                    "wrote {} samples ({} dropped) to {}\n",
                    ds.samples.len(),
                    ds.provenance.dropped,
                    dir.display()
                ),
            )
        }
        Command::Train(a) => {
            apply_train(&mut cfg, a);
            cfg.validate()?;
            let net = config_case(&cfg, &a.case)?;
            let ds_dir = a.dataset.clone().unwrap_or_else(|| cfg.output.join("dataset"));
            let model_path = a.out.clone().unwrap_or_else(|| cfg.output.join("model.json"));
            let log_path = a.loss_log.clone().unwrap_or_else(|| model_path.with_extension("loss.csv"));
            let ds = dataset::read_dataset(&ds_dir, Some(&net))?;
            let (pred, log) = cmd_train(&net, &ds, &cfg)?;
            write_file(&model_path, &pred.to_json()?)?;
            write_file(&log_path, &loss_csv(&log))?;
            let last = |v: &[Vec<f64>]| v.iter().filter_map(|l| l.last()).sum::<f64>();
            emit(
                out,
                &format!(
                    "trained {} epochs: vm loss {:.3e}, va loss {:.3e}; model {}\n",
                    cfg.train.max_epochs,
                    last(&log.vmp),
                    last(&log.vap),
                    model_path.display()
                ),
            )
        }
        Command::Evaluate(a) => {
            if let Some(r) = a.rounds {
                cfg.post_process.max_rounds = r;
            }
            cfg.validate()?;
            let net = config_case(&cfg, &a.case)?;
            let ds_dir = a.dataset.clone().unwrap_or_else(|| cfg.output.join("dataset"));
            let dir = a.out.clone().unwrap_or_else(|| cfg.output.join("report"));
            let ds = dataset::read_dataset(&ds_dir, Some(&net))?;
            let eval_cfg = EvalConfig {
                modes: a.pp.clone(),
                post_process: cfg.post_process,
                ..EvalConfig::default()
            };
            let report = if a.oracle_pass_through {
                let anchor = crate::acpf::VoltageState::mean(ds.train_samples()?.iter().map(|s| &s.target_state))
                    .ok_or(DatasetError::EmptyTrain)?;
                evaluate_with(&net, &ds, &OraclePassThrough, anchor, &eval_cfg)?
            } else {
                let path = a.model.clone().unwrap_or_else(|| cfg.output.join("model.json"));
                let pred = load_model(&path, &net)?;
                let anchor = pred.anchor.clone();
                evaluate_with(&net, &ds, &pred, anchor, &eval_cfg)?
            };
            report.write_files(&dir)?;
            emit(out, &report.to_markdown())
        }
        Command::Infer(a) => {
            if let Some(m) = a.pp_mode {
                cfg.post_process.mode = m;
            }
            if let Some(r) = a.rounds {
                cfg.post_process.max_rounds = r;
            }
            let net = config_case(&cfg, &a.case)?;
            let path = a.model.clone().unwrap_or_else(|| cfg.output.join("model.json"));
            let pred = load_model(&path, &net)?;
            let text = fs::read_to_string(&a.scenarios).map_err(|e| io_err(&a.scenarios, e))?;
            let pp = a.post_process.then_some(cfg.post_process);
            let csv = cmd_infer(&net, &pred, &text, pp.as_ref())?;
            match &a.out {
                Some(p) => write_file(p, &csv),
                None => emit(out, &csv),
            }
        }
    }
}

fn apply_gen(cfg: &mut RunConfig, a: &GenArgs) {
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.variation {
        cfg.variation = v;
    }
    if let Some(v) = a.sampling_seed {
        cfg.seeds.sampling = v;
    }
    if let Some(v) = a.split_seed {
        cfg.seeds.split = v;
    }
    if let Some(v) = a.train_fraction {
        cfg.train_fraction = v;
    }
    if let Some(v) = a.tol {
        cfg.solver.tol = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenDims(pub Vec<usize>);

fn parse_hidden(s: &str) -> Result<HiddenDims, String> {
    if s == "none" {
        return Ok(HiddenDims(Vec::new()));
    }
    s.split(',')
        .map(|w| match w.trim().parse() {
            Ok(0) | Err(_) => Err(format!("bad layer width '{w}'")),
            Ok(v) => Ok(v),
        })
        .collect::<Result<_, _>>()
        .map(HiddenDims)
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = &a.hidden {
        cfg.hidden_dims = Some(v.0.clone());
    }
    if let Some(v) = a.seed {
        cfg.seeds.train = v;
    }
    if let Some(v) = a.bus_groups {
        cfg.train.bus_groups = v;
    }
}

/// Reads a case file, falling back to the bundled cases by name.
pub fn load_case(spec: &str) -> Result<Network, CliError> {
    let path = Path::new(spec);
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| io_err(path, e))?
    } else if let Some(text) = cases::bundled(spec) {
        text.to_string()
    } else {
        return Err(CliError::Data(format!("{spec}: no such case file or bundled case")));
    };
    parse_case(&text).map_err(|e| CliError::Data(format!("{spec}: {e}")))
}

fn config_case(cfg: &RunConfig, arg: &CaseArg) -> Result<Network, CliError> {
    let spec = arg
        .case
        .as_deref()
        .or(cfg.case.as_deref())
        .ok_or_else(|| CliError::Usage("no case given (use --case or set `case` in the config)".into()))?;
    load_case(spec)
}

fn load_model(path: &Path, net: &Network) -> Result<VoltagePredictor, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pred = VoltagePredictor::from_json(&text)?;
    pred.check_case(net)?;
    Ok(pred)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn case_info(net: &Network, json: bool) -> String {
    let reference = net.bus_ids()[net.reference_bus()];
    if json {
        let v = serde_json::json!({
            "buses": net.n_bus(),
            "generators": net.n_gen(),
            "branches": net.n_branch(),
            "base_mva": net.base_mva(),
            "reference_bus": reference,
            "fingerprint": net.fingerprint(),
        });
        return format!("{v}\n");
    }
    let mut s = String::new();
    let _ = writeln!(s, "buses       {}", net.n_bus());
    let _ = writeln!(s, "generators  {}", net.n_gen());
    let _ = writeln!(s, "branches    {}", net.n_branch());
    let _ = writeln!(s, "base MVA    {}", net.base_mva());
    let _ = writeln!(s, "reference   bus {reference}");
    let _ = writeln!(s, "fingerprint {}", net.fingerprint());
    s
}

pub fn cmd_gen_dataset(
    net: &Network,
    cfg: &RunConfig,
    scenarios_csv: Option<&str>,
    parallel: bool,
    dir: &Path,
) -> Result<dataset::Dataset, CliError> {
    let (scenarios, variation) = match scenarios_csv {
        Some(text) => (dataset::parse_scenarios(text, net)?, None),
        None => (
            dataset::sample_loads(net, cfg.variation, cfg.samples, cfg.seeds.sampling)?,
            Some(cfg.variation),
        ),
    };
    let mut ds = dataset::generate_dataset(net, &scenarios, &cfg.solver, parallel)?;
    ds.provenance.sampling_seed = variation.map(|_| cfg.seeds.sampling);
    ds.provenance.variation = variation;
    dataset::split_dataset(&mut ds, cfg.train_fraction, cfg.seeds.split)?;
    dataset::fit_scaler(&mut ds)?;
    dataset::write_dataset(&ds, dir)?;
    Ok(ds)
}

pub fn cmd_train(net: &Network, ds: &dataset::Dataset, cfg: &RunConfig) -> Result<(VoltagePredictor, TrainLog), CliError> {
    let hidden = cfg
        .hidden_dims
        .clone()
        .unwrap_or_else(|| nnet::default_hidden_dims(net.n_bus()));
    let tc = TrainConfig {
        seed: cfg.seeds.train,
        ..cfg.train
    };
    Ok(nnet::train(ds, net, &hidden, &tc)?)
}

fn evaluate_with(
    net: &Network,
    ds: &dataset::Dataset,
    source: &dyn VoltageSource,
    anchor: crate::acpf::VoltageState,
    cfg: &EvalConfig,
) -> Result<crate::evalkit::MetricsReport, CliError> {
    let model = if cfg.modes.iter().any(|m| *m != PpMode::Off) {
        Some(correction_model_at(net, anchor).map_err(|e| CliError::Data(e.to_string()))?)
    } else {
        None
    };
    Ok(evaluate(net, ds, source, model.as_ref(), cfg)?)
}

/// Header `epoch,vm_g<k>...,va_g<k>...`; row 0 is the untrained loss.
pub fn loss_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch");
    for k in 0..log.vmp.len() {
        let _ = write!(s, ",vm_g{k}");
    }
    for k in 0..log.vap.len() {
        let _ = write!(s, ",va_g{k}");
    }
    s.push('\n');
    let epochs = log.vmp.iter().chain(&log.vap).map(Vec::len).max().unwrap_or(0);
    for e in 0..epochs {
        let _ = write!(s, "{e}");
        for series in log.vmp.iter().chain(&log.vap) {
            match series.get(e) {
                Some(v) => {
                    let _ = write!(s, ",{}", dataset::fmt17(*v));
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// One output row per scenario: `vm_<bus>...,va_<bus>...,pg_<k>...,qg_<k>...,objective`
/// with angles in radians and generator outputs in p.u.
pub fn cmd_infer(
    net: &Network,
    pred: &VoltagePredictor,
    scenarios_csv: &str,
    pp: Option<&PostProcessConfig>,
) -> Result<String, CliError> {
    let scenarios = dataset::parse_scenarios(scenarios_csv, net)?;
    let model = match pp {
        Some(c) if c.mode != PpMode::Off => {
            Some(correction_model_at(net, pred.anchor.clone()).map_err(|e| CliError::Data(e.to_string()))?)
        }
        _ => None,
    };
    let ids = net.bus_ids();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = Vec::new();
    header.extend(ids.iter().map(|b| format!("vm_{b}")));
    header.extend(ids.iter().map(|b| format!("va_{b}")));
    header.extend((0..net.n_gen()).map(|k| format!("pg_{k}")));
    header.extend((0..net.n_gen()).map(|k| format!("qg_{k}")));
    header.push("objective".into());
    let csv_err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for loads in &scenarios {
        let state = pred.predict_voltages(loads)?;
        let mut pt = reconstruct(net, loads, &state).map_err(|e| CliError::Data(e.to_string()))?;
        if let (Some(c), Some(m)) = (pp, model.as_ref()) {
            pt = post_process(net, loads, &pt, m, c).map_err(|e| CliError::Data(e.to_string()))?;
        }
        let pg = crate::recon::generator_dispatch(net, &pt.pg_bus);
        let qg = crate::recon::generator_dispatch(net, &pt.qg_bus);
        let row = pt
            .state
            .vm
            .iter()
            .chain(&pt.state.va)
            .chain(&pg)
            .chain(&qg)
            .chain(std::iter::once(&pt.objective))
            .map(|v| dataset::fmt17(*v));
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
