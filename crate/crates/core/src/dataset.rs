//! Load-scenario sampling, oracle labeling, normalization, splitting and
//! on-disk persistence.
//!
//! A dataset directory holds `meta.json` and `samples.csv`. Floats in the CSV
//! are written with 17 significant digits so a write/read cycle is lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{bus_injections, VoltageState};
use crate::netmodel::{Loads, Network};
use crate::oracle::{solve_opf, OpfSolution, SolverConfig};

/// Per-bus balance tolerance every stored label must pass.
pub const BALANCE_RECHECK_TOL: f64 = 1e-6;
/// Offset removed from magnitude targets.
pub const VM_CENTER: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset was built for case {found}, but the given case has fingerprint {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("only {converged} of {total} scenarios produced a valid optimum (need at least half)")]
    TooFewConverged { converged: usize, total: usize },
    #[error("variation must lie in [0, 1), got {0}")]
    Variation(f64),
    #[error("train fraction must lie in (0, 1), got {0}")]
    TrainFraction(f64),
    #[error("no scenarios given")]
    NoScenarios,
    #[error("dataset has no train/test split")]
    NoSplit,
    #[error("train split is empty")]
    EmptyTrain,
    #[error("column '{column}': {message}")]
    Column { column: String, message: String },
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    Number { row: usize, column: String, value: String },
    #[error("expected {expected} buses, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub loads: Loads,
    pub target_state: VoltageState,
    pub objective: f64,
    pub oracle_time: f64,
}

/// Min-max input scaling fitted on the train split; targets use a fixed
/// affine map (magnitudes shifted by [`VM_CENTER`], angles in radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a Loads>) -> Option<Scaler> {
        let mut it = inputs.into_iter();
        let first = flatten(it.next()?);
        let mut lo = first.clone();
        let mut hi = first;
        for loads in it {
            for (k, v) in flatten(loads).into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        Some(Scaler {
            input_min: lo,
            input_max: hi,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_min.len()
    }

    /// Constant dimensions map to 0.5.
    pub fn apply_input(&self, loads: &Loads) -> Vec<f64> {
        flatten(loads)
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                let span = self.input_max[k] - self.input_min[k];
                if span == 0.0 {
                    0.5
                } else {
                    (v - self.input_min[k]) / span
                }
            })
            .collect()
    }

    /// Constant dimensions return their fitted value.
    pub fn invert_input(&self, scaled: &[f64]) -> Loads {
        let n = scaled.len() / 2;
        let raw: Vec<f64> = scaled
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let span = self.input_max[k] - self.input_min[k];
                if span == 0.0 {
                    self.input_min[k]
                } else {
                    self.input_min[k] + s * span
                }
            })
            .collect();
        Loads {
            pd: raw[..n].to_vec(),
            qd: raw[n..].to_vec(),
        }
    }

    pub fn apply_vm(vm: &[f64]) -> Vec<f64> {
        vm.iter().map(|v| v - VM_CENTER).collect()
    }

    pub fn invert_vm(scaled: &[f64]) -> Vec<f64> {
        scaled.iter().map(|v| v + VM_CENTER).collect()
    }
}

fn flatten(loads: &Loads) -> Vec<f64> {
    loads.pd.iter().chain(loads.qd.iter()).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// How the scenarios were produced and labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sampling_seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub variation: Option<f64>,
    pub solver: SolverConfig,
    pub scenario_count: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub case_fingerprint: String,
    pub bus_ids: Vec<u32>,
    pub samples: Vec<Sample>,
    pub scaler: Option<Scaler>,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn check_case(&self, net: &Network) -> Result<(), DatasetError> {
        let expected = net.fingerprint();
        if expected != self.case_fingerprint {
            return Err(DatasetError::Fingerprint {
                expected,
                found: self.case_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn train_samples(&self) -> Result<Vec<&Sample>, DatasetError> {
        let split = self.split.as_ref().ok_or(DatasetError::NoSplit)?;
        Ok(split.train.iter().map(|&i| &self.samples[i]).collect())
    }

    pub fn test_samples(&self) -> Result<Vec<&Sample>, DatasetError> {
        let split = self.split.as_ref().ok_or(DatasetError::NoSplit)?;
        Ok(split.test.iter().map(|&i| &self.samples[i]).collect())
    }
}

/// Draws `count` scenarios, each bus demand independently uniform within
/// `±variation` of its default value.
pub fn sample_loads(
    net: &Network,
    variation: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Loads>, DatasetError> {
    if !(0.0..1.0).contains(&variation) {
        return Err(DatasetError::Variation(variation));
    }
    let base = net.default_loads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |d: f64, rng: &mut ChaCha8Rng| {
        let a = d * (1.0 - variation);
        let b = d * (1.0 + variation);
        let (lo, hi) = (a.min(b), a.max(b));
        let u: f64 = rng.gen();
        if lo == hi {
            d
        } else {
            lo + u * (hi - lo)
        }
    };
    Ok((0..count)
        .map(|_| Loads {
            pd: base.pd.iter().map(|&d| draw(d, &mut rng)).collect(),
            qd: base.qd.iter().map(|&d| draw(d, &mut rng)).collect(),
        })
        .collect())
}

/// Largest per-bus balance residual of `state` against `loads`, given the
/// generator outputs of a solution.
pub fn balance_residual(net: &Network, loads: &Loads, sol: &OpfSolution) -> f64 {
    let Ok(inj) = bus_injections(net, &sol.state) else {
        return f64::INFINITY;
    };
    let mut worst = 0.0_f64;
    for i in 0..net.n_bus() {
        let pg: f64 = net.generators_at(i).iter().map(|&k| sol.pg[k]).sum();
        let qg: f64 = net.generators_at(i).iter().map(|&k| sol.qg[k]).sum();
        worst = worst
            .max((inj.p[i] - (pg - loads.pd[i])).abs())
            .max((inj.q[i] - (qg - loads.qd[i])).abs());
    }
    worst
}

fn label(net: &Network, loads: &Loads, solver: &SolverConfig) -> Option<Sample> {
    let sol = solve_opf(net, loads, solver);
    if !sol.converged() || balance_residual(net, loads, &sol) > BALANCE_RECHECK_TOL {
        return None;
    }
    let mut state = sol.state;
    state.rezero(net.reference_bus());
    Some(Sample {
        loads: loads.clone(),
        target_state: state,
        objective: sol.objective,
        oracle_time: sol.solve_time.max(f64::MIN_POSITIVE),
    })
}

/// Labels every scenario with the oracle. Scenarios without a valid optimum
/// are dropped; the run aborts when fewer than half survive. With `parallel`
/// set (and the feature enabled) scenarios are solved on the rayon pool, which
/// inflates the recorded per-sample oracle times under contention.
pub fn generate_dataset(
    net: &Network,
    scenarios: &[Loads],
    solver: &SolverConfig,
    parallel: bool,
) -> Result<Dataset, DatasetError> {
    if scenarios.is_empty() {
        return Err(DatasetError::NoScenarios);
    }
    for s in scenarios {
        if s.pd.len() != net.n_bus() || s.qd.len() != net.n_bus() {
            return Err(DatasetError::Dimension {
                expected: net.n_bus(),
                got: s.pd.len().min(s.qd.len()),
            });
        }
    }
    let labeled = label_all(net, scenarios, solver, parallel);
    let samples: Vec<Sample> = labeled.into_iter().flatten().collect();
    if 2 * samples.len() < scenarios.len() {
        return Err(DatasetError::TooFewConverged {
            converged: samples.len(),
            total: scenarios.len(),
        });
    }
    Ok(Dataset {
        case_fingerprint: net.fingerprint(),
        bus_ids: net.bus_ids(),
        provenance: Provenance {
            sampling_seed: None,
            split_seed: None,
            variation: None,
            solver: *solver,
            scenario_count: scenarios.len(),
            dropped: scenarios.len() - samples.len(),
        },
        samples,
        scaler: None,
        split: None,
    })
}

#[cfg(feature = "parallel")]
fn label_all(net: &Network, scenarios: &[Loads], solver: &SolverConfig, parallel: bool) -> Vec<Option<Sample>> {
    use rayon::prelude::*;
    if parallel {
        scenarios.par_iter().map(|l| label(net, l, solver)).collect()
    } else {
        scenarios.iter().map(|l| label(net, l, solver)).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn label_all(net: &Network, scenarios: &[Loads], solver: &SolverConfig, _parallel: bool) -> Vec<Option<Sample>> {
    scenarios.iter().map(|l| label(net, l, solver)).collect()
}

/// Random permutation split; both index lists are stored sorted. With two or
/// more samples each side gets at least one.
pub fn split_dataset(ds: &mut Dataset, train_fraction: f64, seed: u64) -> Result<(), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::TrainFraction(train_fraction));
    }
    let n = ds.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = if n < 2 {
        n
    } else {
        ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    ds.split = Some(Split { train, test });
    ds.provenance.split_seed = Some(seed);
    Ok(())
}

pub fn fit_scaler(ds: &mut Dataset) -> Result<(), DatasetError> {
    let train = ds.train_samples()?;
    let scaler = Scaler::fit(train.iter().map(|s| &s.loads)).ok_or(DatasetError::EmptyTrain)?;
    ds.scaler = Some(scaler);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Meta {
    case_fingerprint: String,
    bus_ids: Vec<u32>,
    sample_count: usize,
    provenance: Provenance,
    scaler: Option<Scaler>,
    split: Option<Split>,
}

fn header(bus_ids: &[u32], prefixes: &[&str]) -> Vec<String> {
    prefixes
        .iter()
        .flat_map(|p| bus_ids.iter().map(move |id| format!("{p}_{id}")))
        .collect()
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        case_fingerprint: ds.case_fingerprint.clone(),
        bus_ids: ds.bus_ids.clone(),
        sample_count: ds.samples.len(),
        provenance: ds.provenance.clone(),
        scaler: ds.scaler.clone(),
        split: ds.split.clone(),
    };
    let mut f = fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
    f.write_all(b"\n")?;

    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    let mut cols = header(&ds.bus_ids, &["pd", "qd", "vm", "va"]);
    cols.push("objective".into());
    cols.push("oracle_time_s".into());
    w.write_record(&cols)?;
    for s in &ds.samples {
        let row: Vec<String> = s
            .loads
            .pd
            .iter()
            .chain(&s.loads.qd)
            .chain(&s.target_state.vm)
            .chain(&s.target_state.va)
            .chain([&s.objective, &s.oracle_time])
            .map(|v| fmt17(*v))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory, checking it against `net` when given.
pub fn read_dataset(dir: &Path, net: Option<&Network>) -> Result<Dataset, DatasetError> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if let Some(net) = net {
        let expected = net.fingerprint();
        if expected != meta.case_fingerprint {
            return Err(DatasetError::Fingerprint {
                expected,
                found: meta.case_fingerprint,
            });
        }
    }
    let n = meta.bus_ids.len();
    let mut expected_cols = header(&meta.bus_ids, &["pd", "qd", "vm", "va"]);
    expected_cols.push("objective".into());
    expected_cols.push("oracle_time_s".into());
    let mut rdr = csv::Reader::from_path(dir.join("samples.csv"))?;
    check_header(rdr.headers()?, &expected_cols)?;
    let mut samples = Vec::with_capacity(meta.sample_count);
    for (row, rec) in rdr.records().enumerate() {
        let vals = parse_row(&rec?, &expected_cols, row + 1)?;
        samples.push(Sample {
            loads: Loads {
                pd: vals[..n].to_vec(),
                qd: vals[n..2 * n].to_vec(),
            },
            target_state: VoltageState {
                vm: vals[2 * n..3 * n].to_vec(),
                va: vals[3 * n..4 * n].to_vec(),
            },
            objective: vals[4 * n],
            oracle_time: vals[4 * n + 1],
        });
    }
    if samples.len() != meta.sample_count {
        return Err(DatasetError::Column {
            column: "samples.csv".into(),
            message: format!(
                "meta.json lists {} samples, file holds {}",
                meta.sample_count,
                samples.len()
            ),
        });
    }
    Ok(Dataset {
        case_fingerprint: meta.case_fingerprint,
        bus_ids: meta.bus_ids,
        samples,
        scaler: meta.scaler,
        split: meta.split,
        provenance: meta.provenance,
    })
}

fn check_header(found: &csv::StringRecord, expected: &[String]) -> Result<(), DatasetError> {
    for (k, want) in expected.iter().enumerate() {
        match found.get(k) {
            Some(got) if got.trim() == want => {}
            Some(got) => {
                return Err(DatasetError::Column {
                    column: got.to_string(),
                    message: format!("expected '{want}' at position {}", k + 1),
                })
            }
            None => {
                return Err(DatasetError::Column {
                    column: want.clone(),
                    message: "missing".into(),
                })
            }
        }
    }
    if found.len() > expected.len() {
        return Err(DatasetError::Column {
            column: found[expected.len()].to_string(),
            message: "unexpected extra column".into(),
        });
    }
    Ok(())
}

fn parse_row(rec: &csv::StringRecord, cols: &[String], row: usize) -> Result<Vec<f64>, DatasetError> {
    if rec.len() != cols.len() {
        return Err(DatasetError::Column {
            column: format!("row {row}"),
            message: format!("expected {} fields, found {}", cols.len(), rec.len()),
        });
    }
    rec.iter()
        .zip(cols)
        .map(|(v, c)| {
            v.trim().parse::<f64>().map_err(|_| DatasetError::Number {
                row,
                column: c.clone(),
                value: v.to_string(),
            })
        })
        .collect()
}

/// Parses an external scenario table with columns `pd_<bus>…,qd_<bus>…`
/// (p.u., buses in case order).
pub fn parse_scenarios(text: &str, net: &Network) -> Result<Vec<Loads>, DatasetError> {
    let n = net.n_bus();
    let cols = header(&net.bus_ids(), &["pd", "qd"]);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    check_header(rdr.headers()?, &cols)?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let vals = parse_row(&rec?, &cols, row + 1)?;
        out.push(Loads {
            pd: vals[..n].to_vec(),
            qd: vals[n..].to_vec(),
        });
    }
    Ok(out)
}

pub fn write_scenarios(scenarios: &[Loads], net: &Network) -> Result<String, DatasetError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(&net.bus_ids(), &["pd", "qd"]))?;
    for s in scenarios {
        w.write_record(s.pd.iter().chain(&s.qd).map(|v| fmt17(*v)))?;
    }
    let bytes = w.into_inner().map_err(|e| DatasetError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
