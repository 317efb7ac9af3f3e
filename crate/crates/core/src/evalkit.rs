//! Test-set metrics: optimality gap, speedup, constraint satisfaction and
//! violation degree per class, load satisfaction, and report emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{AcpfError, VoltageState};
use crate::dataset::{Dataset, DatasetError, Sample};
use crate::netmodel::{Loads, Network};
use crate::nnet::{NnetError, VoltagePredictor};
use crate::recon::{post_process, reconstruct, ConstraintClass, ConstraintLayout, CorrectionModel, PostProcessConfig, PpMode, ReconstructedPoint};
use crate::timer::Stopwatch;

/// Exceedances at or below this count as satisfied.
pub const DEFAULT_VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test split is empty")]
    EmptyTest,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error("post-processing mode '{0}' needs a correction model")]
    MissingModel(PpMode),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean of `(pred − oracle)/oracle` in percent.
pub fn optimality_loss(pred: &[f64], oracle: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred.iter().zip(oracle).map(|(p, o)| (p - o) / o).sum();
    100.0 * sum / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Mean of per-sample ratios, the headline figure.
    pub mean_ratio: f64,
    pub ratio_of_means: f64,
}

pub fn speedup(oracle_times: &[f64], pred_times: &[f64]) -> Speedup {
    let n = oracle_times.len().max(1) as f64;
    let mean_ratio = oracle_times.iter().zip(pred_times).map(|(o, p)| o / p).sum::<f64>() / n;
    let ratio_of_means = oracle_times.iter().sum::<f64>() / pred_times.iter().sum::<f64>();
    Speedup {
        mean_ratio,
        ratio_of_means,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: ConstraintClass,
    pub evaluations: usize,
    pub violated: usize,
    /// Satisfied share in percent.
    pub eta: f64,
    /// Mean exceedance over violated evaluations.
    pub mean_violation: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub classes: Vec<ClassStats>,
}

pub const CLASSES: [ConstraintClass; 5] = [
    ConstraintClass::Vm,
    ConstraintClass::Pg,
    ConstraintClass::Qg,
    ConstraintClass::Flow,
    ConstraintClass::Angle,
];

pub fn class_label(class: ConstraintClass) -> &'static str {
    match class {
        ConstraintClass::Vm => "V",
        ConstraintClass::Pg => "Pg",
        ConstraintClass::Qg => "Qg",
        ConstraintClass::Flow => "Sl",
        ConstraintClass::Angle => "theta_l",
    }
}

impl ConstraintReport {
    pub fn get(&self, class: ConstraintClass) -> &ClassStats {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .expect("every class is present")
    }
}

/// Counts violated evaluations per class over a tally of exceedances.
pub fn summarize(exceedances: &[(ConstraintClass, f64)], tol: f64) -> ConstraintReport {
    let classes = CLASSES
        .iter()
        .map(|&class| {
            let mut evaluations = 0;
            let mut violated = 0;
            let mut sum = 0.0;
            let mut max = 0.0_f64;
            for (c, e) in exceedances {
                if *c != class {
                    continue;
                }
                evaluations += 1;
                if *e > tol {
                    violated += 1;
                    sum += e;
                    max = max.max(*e);
                }
            }
            ClassStats {
                class,
                evaluations,
                violated,
                eta: if evaluations == 0 {
                    100.0
                } else {
                    100.0 * (evaluations - violated) as f64 / evaluations as f64
                },
                mean_violation: if violated == 0 { 0.0 } else { sum / violated as f64 },
                max_violation: max,
            }
        })
        .collect();
    ConstraintReport { classes }
}

pub fn constraint_stats(net: &Network, layout: &ConstraintLayout, points: &[ReconstructedPoint], tol: f64) -> ConstraintReport {
    let mut tally = Vec::with_capacity(points.len() * layout.len());
    for pt in points {
        let df = layout.violations(&layout.values(net, pt));
        for (row, d) in layout.rows.iter().zip(df) {
            tally.push((row.class(), d.abs()));
        }
    }
    summarize(&tally, tol)
}

/// L1 load-satisfaction ratios in percent; injections stranded at buses
/// without generation or load count as unserved.
pub fn load_satisfaction(points: &[ReconstructedPoint], loads: &[&Loads]) -> (f64, f64) {
    let mut err = (0.0, 0.0);
    let mut total = (0.0, 0.0);
    for (pt, l) in points.iter().zip(loads) {
        for i in 0..l.pd.len() {
            if l.has_load(i) {
                err.0 += (pt.pd_hat[i] - l.pd[i]).abs();
                err.1 += (pt.qd_hat[i] - l.qd[i]).abs();
            }
            err.0 += pt.mismatch_p[i].abs();
            err.1 += pt.mismatch_q[i].abs();
            total.0 += l.pd[i].abs();
            total.1 += l.qd[i].abs();
        }
    }
    let ratio = |e: f64, t: f64| if t == 0.0 { 100.0 } else { 100.0 * (1.0 - e / t) };
    (ratio(err.0, total.0), ratio(err.1, total.1))
}

/// Anything that turns a test sample into predicted voltages.
pub trait VoltageSource {
    fn predict(&self, sample: &Sample) -> Result<VoltageState, EvalError>;

    /// Fingerprint of the case the source was built for, if it has one.
    fn case_fingerprint(&self) -> Option<&str> {
        None
    }
}

impl VoltageSource for VoltagePredictor {
    fn predict(&self, sample: &Sample) -> Result<VoltageState, EvalError> {
        Ok(self.predict_voltages(&sample.loads)?)
    }

    fn case_fingerprint(&self) -> Option<&str> {
        Some(&self.case_fingerprint)
    }
}

/// Returns each sample's stored optimum; a sanity baseline for the metrics.
pub struct OraclePassThrough;

impl VoltageSource for OraclePassThrough {
    fn predict(&self, sample: &Sample) -> Result<VoltageState, EvalError> {
        Ok(sample.target_state.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub modes: Vec<PpMode>,
    pub post_process: PostProcessConfig,
    pub violation_tol: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            modes: vec![PpMode::Off, PpMode::Historical, PpMode::Exact],
            post_process: PostProcessConfig::default(),
            violation_tol: DEFAULT_VIOLATION_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub oracle_mean_ms: f64,
    pub inference_mean_ms: f64,
    pub speedup: Speedup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub eta_opt: f64,
    pub constraints: ConstraintReport,
    pub eta_pd: f64,
    pub eta_qd: f64,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_fingerprint: String,
    pub test_samples: usize,
    pub violation_tol: f64,
    pub stages: Vec<StageReport>,
}

pub fn stage_name(mode: PpMode) -> String {
    match mode {
        PpMode::Off => "before_pp".into(),
        m => format!("after_pp_{m}"),
    }
}

pub fn evaluate(
    net: &Network,
    ds: &Dataset,
    source: &dyn VoltageSource,
    model: Option<&CorrectionModel>,
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    ds.check_case(net)?;
    if let Some(fp) = source.case_fingerprint() {
        if fp != ds.case_fingerprint {
            return Err(NnetError::Fingerprint {
                expected: ds.case_fingerprint.clone(),
                found: fp.to_string(),
            }
            .into());
        }
    }
    let test = ds.test_samples()?;
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let layout = ConstraintLayout::new(net);

    let mut base_points = Vec::with_capacity(test.len());
    let mut base_times = Vec::with_capacity(test.len());
    for s in &test {
        let clock = Stopwatch::start();
        let state = source.predict(s)?;
        let pt = reconstruct(net, &s.loads, &state)?;
        base_times.push(clock.seconds());
        base_points.push(pt);
    }

    let oracle_times: Vec<f64> = test.iter().map(|s| s.oracle_time).collect();
    let oracle_obj: Vec<f64> = test.iter().map(|s| s.objective).collect();
    let loads: Vec<&Loads> = test.iter().map(|s| &s.loads).collect();
    let mut stages = Vec::new();
    for &mode in &cfg.modes {
        let (points, times) = if mode == PpMode::Off {
            (base_points.clone(), base_times.clone())
        } else {
            let model = model.ok_or(EvalError::MissingModel(mode))?;
            let pp = PostProcessConfig {
                mode,
                ..cfg.post_process
            };
            let mut pts = Vec::with_capacity(test.len());
            let mut times = Vec::with_capacity(test.len());
            for (k, s) in test.iter().enumerate() {
                let clock = Stopwatch::start();
                pts.push(post_process(net, &s.loads, &base_points[k], model, &pp)?);
                times.push(base_times[k] + clock.seconds());
            }
            (pts, times)
        };
        let pred_obj: Vec<f64> = points.iter().map(|p| p.objective).collect();
        let (eta_pd, eta_qd) = load_satisfaction(&points, &loads);
        let n = times.len() as f64;
        stages.push(StageReport {
            stage: stage_name(mode),
            eta_opt: optimality_loss(&pred_obj, &oracle_obj),
            constraints: constraint_stats(net, &layout, &points, cfg.violation_tol),
            eta_pd,
            eta_qd,
            timing: Timing {
                oracle_mean_ms: 1e3 * oracle_times.iter().sum::<f64>() / n,
                inference_mean_ms: 1e3 * times.iter().sum::<f64>() / n,
                speedup: speedup(&oracle_times, &times),
            },
        });
    }
    Ok(MetricsReport {
        case_fingerprint: ds.case_fingerprint.clone(),
        test_samples: test.len(),
        violation_tol: cfg.violation_tol,
        stages,
    })
}

impl MetricsReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Copy with every wall-clock figure zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> MetricsReport {
        let mut r = self.clone();
        for s in &mut r.stages {
            s.timing = Timing {
                oracle_mean_ms: 0.0,
                inference_mean_ms: 0.0,
                speedup: Speedup {
                    mean_ratio: 0.0,
                    ratio_of_means: 0.0,
                },
            };
        }
        r
    }

    fn rows(&self) -> Vec<(String, Vec<f64>)> {
        let col = |f: &dyn Fn(&StageReport) -> f64| self.stages.iter().map(f).collect::<Vec<f64>>();
        let mut rows = vec![("eta_opt_pct".to_string(), col(&|s| s.eta_opt))];
        for class in CLASSES {
            let label = class_label(class);
            rows.push((format!("eta_{label}_pct"), col(&|s| s.constraints.get(class).eta)));
            rows.push((format!("delta_{label}"), col(&|s| s.constraints.get(class).mean_violation)));
            rows.push((format!("delta_max_{label}"), col(&|s| s.constraints.get(class).max_violation)));
        }
        rows.push(("eta_Pd_pct".into(), col(&|s| s.eta_pd)));
        rows.push(("eta_Qd_pct".into(), col(&|s| s.eta_qd)));
        rows.push(("oracle_mean_ms".into(), col(&|s| s.timing.oracle_mean_ms)));
        rows.push(("inference_mean_ms".into(), col(&|s| s.timing.inference_mean_ms)));
        rows.push(("speedup_mean_ratio".into(), col(&|s| s.timing.speedup.mean_ratio)));
        rows.push(("speedup_ratio_of_means".into(), col(&|s| s.timing.speedup.ratio_of_means)));
        rows
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Evaluation report\n");
        let _ = writeln!(out, "Test samples: {}  ", self.test_samples);
        let _ = writeln!(out, "Violation tolerance: {:e}\n", self.violation_tol);
        let _ = write!(out, "| metric |");
        for s in &self.stages {
            let _ = write!(out, " {} |", s.stage);
        }
        let _ = write!(out, "\n|---|");
        for _ in &self.stages {
            let _ = write!(out, "---|");
        }
        out.push('\n');
        for (name, vals) in self.rows() {
            let _ = write!(out, "| {name} |");
            for v in vals {
                let _ = write!(out, " {v:.4} |");
            }
            out.push('\n');
        }
        out
    }

    /// Long format: `stage,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,metric,value\n");
        let rows = self.rows();
        for (k, s) in self.stages.iter().enumerate() {
            for (name, vals) in &rows {
                let _ = writeln!(out, "{},{},{}", s.stage, name, vals[k]);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<MetricsReport, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_files(&self, dir: &std::path::Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json()? + "\n")?;
        Ok(())
    }
}
