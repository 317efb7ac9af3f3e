//! Browser bindings: pick a bundled case, train a small predictor pair on
//! freshly solved scenarios, and compare its voltages against the solver.

use gridvolt::dataset::{fit_scaler, generate_dataset, sample_loads, split_dataset};
use gridvolt::nnet::{default_hidden_dims, train, TrainConfig, VoltagePredictor};
use gridvolt::oracle::{solve_opf, SolverConfig};
use gridvolt::recon::{correction_model_at, post_process, reconstruct, CorrectionModel, PostProcessConfig};
use gridvolt::{parse_case, Loads, Network};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[cfg(target_arch = "wasm32")]
fn now_ms() -> f64 {
    js_sys::Date::now()
}

#[cfg(not(target_arch = "wasm32"))]
fn now_ms() -> f64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64() * 1e3)
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_hidden(text: &str, n_bus: usize) -> Result<Vec<usize>, String> {
    match text.trim() {
        "" => Ok(default_hidden_dims(n_bus)),
        "none" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|w| w.trim().parse::<usize>().ok().filter(|v| *v > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| format!("bad layer widths '{list}'")),
    }
}

#[derive(Serialize)]
struct Summary {
    buses: usize,
    generators: usize,
    branches: usize,
    bus_ids: Vec<u32>,
    vmin: Vec<f64>,
    vmax: Vec<f64>,
}

#[derive(Serialize)]
struct TrainSummary {
    samples: usize,
    dropped: usize,
    hidden: Vec<usize>,
    epochs: usize,
    vm_loss: f64,
    va_loss: f64,
    solve_ms: f64,
    train_ms: f64,
}

#[derive(Serialize)]
struct Profile {
    vm: Vec<f64>,
    va: Vec<f64>,
    objective: f64,
    ms: f64,
}

#[derive(Serialize)]
struct Comparison {
    oracle: Option<Profile>,
    predicted: Profile,
    corrected: Profile,
    /// Relative cost gap of the corrected point in percent, when the solver converged.
    gap_pct: Option<f64>,
}

#[wasm_bindgen]
pub struct Demo {
    net: Network,
    predictor: Option<VoltagePredictor>,
    correction: Option<CorrectionModel>,
}

#[wasm_bindgen]
impl Demo {
    /// `case` is a bundled name (case14, case30, case118) or MATPOWER/JSON text.
    #[wasm_bindgen(constructor)]
    pub fn new(case: &str) -> Result<Demo, JsError> {
        let text = gridvolt::cases::bundled(case).unwrap_or(case);
        let net = parse_case(text).map_err(js_err)?;
        Ok(Demo {
            net,
            predictor: None,
            correction: None,
        })
    }

    pub fn summary(&self) -> String {
        let b = self.net.buses();
        serde_json::to_string(&Summary {
            buses: self.net.n_bus(),
            generators: self.net.n_gen(),
            branches: self.net.n_branch(),
            bus_ids: self.net.bus_ids(),
            vmin: b.iter().map(|b| b.vmin).collect(),
            vmax: b.iter().map(|b| b.vmax).collect(),
        })
        .expect("summary serializes")
    }

    /// Solves `samples` ±10% scenarios, trains for `epochs` and keeps the
    /// result for [`Demo::compare`]. `hidden` is comma-separated widths,
    /// `none` for affine maps, or empty for the size-based default.
    pub fn train(&mut self, samples: usize, epochs: usize, seed: u32, hidden: &str) -> Result<String, JsError> {
        let seed = u64::from(seed);
        let hidden = parse_hidden(hidden, self.net.n_bus()).map_err(js_err)?;
        let t0 = now_ms();
        let scenarios = sample_loads(&self.net, 0.1, samples, seed).map_err(js_err)?;
        let mut ds = generate_dataset(&self.net, &scenarios, &SolverConfig::default(), false).map_err(js_err)?;
        split_dataset(&mut ds, 0.8, seed.wrapping_add(1)).map_err(js_err)?;
        fit_scaler(&mut ds).map_err(js_err)?;
        let t1 = now_ms();
        let cfg = TrainConfig {
            max_epochs: epochs,
            seed,
            final_learning_rate: Some(1e-6),
            standardize_targets: true,
            ..TrainConfig::default()
        };
        let (pred, log) = train(&ds, &self.net, &hidden, &cfg).map_err(js_err)?;
        let t2 = now_ms();
        self.correction = Some(correction_model_at(&self.net, pred.anchor.clone()).map_err(js_err)?);
        self.predictor = Some(pred);
        let last = |v: &[Vec<f64>]| v.iter().filter_map(|l| l.last()).sum::<f64>();
        Ok(serde_json::to_string(&TrainSummary {
            samples: ds.samples.len(),
            dropped: ds.provenance.dropped,
            hidden,
            epochs,
            vm_loss: last(&log.vmp),
            va_loss: last(&log.vap),
            solve_ms: t1 - t0,
            train_ms: t2 - t1,
        })
        .expect("summary serializes"))
    }

    /// Draws one ±10% scenario from `seed`, scales it by `load_scale`, and
    /// returns solver, raw prediction and corrected prediction side by side.
    pub fn compare(&self, load_scale: f64, seed: u32) -> Result<String, JsError> {
        let (Some(pred), Some(model)) = (&self.predictor, &self.correction) else {
            return Err(JsError::new("train a model first"));
        };
        let base = sample_loads(&self.net, 0.1, 1, u64::from(seed)).map_err(js_err)?;
        let loads: Loads = base[0].scaled(load_scale);

        let t0 = now_ms();
        let sol = solve_opf(&self.net, &loads, &SolverConfig::default());
        let t1 = now_ms();
        let state = pred.predict_voltages(&loads).map_err(js_err)?;
        let raw = reconstruct(&self.net, &loads, &state).map_err(js_err)?;
        let t2 = now_ms();
        let fixed = post_process(&self.net, &loads, &raw, model, &PostProcessConfig::default()).map_err(js_err)?;
        let t3 = now_ms();

        let oracle = sol.converged().then(|| Profile {
            vm: sol.state.vm.clone(),
            va: sol.state.va.clone(),
            objective: sol.objective,
            ms: t1 - t0,
        });
        let gap_pct = oracle
            .as_ref()
            .map(|o| 100.0 * (fixed.objective - o.objective) / o.objective);
        Ok(serde_json::to_string(&Comparison {
            oracle,
            predicted: Profile {
                vm: raw.state.vm.clone(),
                va: raw.state.va.clone(),
                objective: raw.objective,
                ms: t2 - t1,
            },
            corrected: Profile {
                vm: fixed.state.vm,
                va: fixed.state.va,
                objective: fixed.objective,
                ms: t3 - t1,
            },
            gap_pct,
        })
        .expect("comparison serializes"))
    }
}
