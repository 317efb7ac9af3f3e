//! Fully-connected ReLU networks, Adam, and the grouped magnitude/angle
//! predictor pair.
//!
//! Batches are stored feature-major: a batch of `B` inputs is an
//! `input_dim × B` matrix, and layer weights are `out × in`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::VoltageState;
use crate::dataset::{Dataset, DatasetError, Scaler};
use crate::netmodel::{Loads, Network};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("input width {got} does not match expected {expected}")]
    Width { expected: usize, got: usize },
    #[error("invalid network shape: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot split {buses} buses into {groups} groups")]
    Groups { buses: usize, groups: usize },
    #[error("non-finite loss in {net} group {group}, epoch {epoch}, batch {batch}")]
    NonFinite {
        net: &'static str,
        group: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("model was trained on case {found}, but the given case has fingerprint {expected}")]
    Fingerprint { expected: String, found: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NnetError::Spec(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpFile", try_from = "MlpFile")]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    spec: MlpSpec,
    layers: Vec<LayerFile>,
}

impl From<MlpParams> for MlpFile {
    fn from(p: MlpParams) -> Self {
        MlpFile {
            spec: p.spec,
            layers: p
                .layers
                .into_iter()
                .map(|l| LayerFile {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpFile> for MlpParams {
    type Error = String;

    fn try_from(f: MlpFile) -> Result<Self, String> {
        let dims = f.spec.dims();
        if f.layers.len() + 1 != dims.len() {
            return Err(format!("expected {} layers, found {}", dims.len() - 1, f.layers.len()));
        }
        let mut layers = Vec::with_capacity(f.layers.len());
        for (k, l) in f.layers.into_iter().enumerate() {
            if l.rows != dims[k + 1] || l.cols != dims[k] || l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(format!("layer {k} has inconsistent shape"));
            }
            layers.push(Layer {
                weight: DMatrix::from_row_slice(l.rows, l.cols, &l.weight),
                bias: DVector::from_vec(l.bias),
            });
        }
        Ok(MlpParams { spec: f.spec, layers })
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<MlpParams, NnetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_with(spec, &mut rng)
}

fn init_with(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<MlpParams, NnetError> {
    spec.validate()?;
    let dims = spec.dims();
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    weight[(r, c)] = rng.gen_range(-limit..=limit);
                }
            }
            Layer {
                weight,
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams {
        spec: spec.clone(),
        layers,
    })
}

impl MlpParams {
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Pre-activations of every layer (last entry is the output).
    fn trace(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut act = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &act;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if k < last {
                act = z.map(|v| v.max(0.0));
            }
            out.push(z);
        }
        out
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NnetError> {
        if x.nrows() != self.spec.input_dim {
            return Err(NnetError::Width {
                expected: self.spec.input_dim,
                got: x.nrows(),
            });
        }
        Ok(self.trace(x).pop().expect("at least one layer"))
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnetError> {
        let m = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.forward(&m)?.as_slice().to_vec())
    }

    /// Gradients of [`mse_loss`] on one batch, with the loss itself.
    pub fn backward(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Vec<Layer>), NnetError> {
        if x.nrows() != self.spec.input_dim {
            return Err(NnetError::Width {
                expected: self.spec.input_dim,
                got: x.nrows(),
            });
        }
        let zs = self.trace(x);
        let pred = zs.last().expect("at least one layer");
        let batch = x.ncols().max(1) as f64;
        let loss = mse_loss(pred, y);
        let mut delta = (pred - y) * (2.0 / batch);
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        for k in (0..self.layers.len()).rev() {
            let input = if k == 0 { x.clone() } else { zs[k - 1].map(|v| v.max(0.0)) };
            grads[k].weight = &delta * input.transpose();
            grads[k].bias = delta.column_sum();
            if k > 0 {
                let mut back = self.layers[k].weight.tr_mul(&delta);
                back.zip_apply(&zs[k - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        Ok((loss, grads))
    }
}

/// Mean over the batch of the per-sample squared error summed over outputs.
pub fn mse_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    if pred.ncols() == 0 {
        return 0.0;
    }
    (pred - target).norm_squared() / pred.ncols() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// When set, the rate follows a half cosine from `learning_rate` in the
    /// first epoch down to this value in the last one.
    pub final_learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bus_groups: usize,
    /// Train on per-bus standardized targets instead of the raw `vm − 1`
    /// and `va` values.
    pub standardize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            final_learning_rate: None,
            max_epochs: 1000,
            batch_size: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bus_groups: 1,
            standardize_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(end) => {
                let frac = if self.max_epochs > 1 {
                    epoch.min(self.max_epochs - 1) as f64 / (self.max_epochs - 1) as f64
                } else {
                    0.0
                };
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnetError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0 && f.is_finite()) {
                return Err(NnetError::Config(format!("final_learning_rate must be positive, got {f}")));
            }
        }
        if self.batch_size == 0 {
            return Err(NnetError::Config("batch_size must be at least 1".into()));
        }
        if self.bus_groups == 0 {
            return Err(NnetError::Config("bus_groups must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(NnetError::Config("Adam betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Layer> = params.layers.iter().map(Layer::zeros_like).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MlpParams, grads: &[Layer], state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    };
    for (k, layer) in params.layers.iter_mut().enumerate() {
        update(
            layer.weight.as_mut_slice(),
            grads[k].weight.as_slice(),
            state.m[k].weight.as_mut_slice(),
            state.v[k].weight.as_mut_slice(),
        );
        update(
            layer.bias.as_mut_slice(),
            grads[k].bias.as_slice(),
            state.m[k].bias.as_mut_slice(),
            state.v[k].bias.as_mut_slice(),
        );
    }
}

/// 512/256/128 at 118 buses, halved per halving of the system size down to
/// 64/32/16.
pub fn default_hidden_dims(n_bus: usize) -> Vec<usize> {
    let ratio = 118.0 / n_bus.max(1) as f64;
    let shift = ratio.log2().round().clamp(0.0, 3.0) as u32;
    [512usize, 256, 128].iter().map(|d| d >> shift).collect()
}

/// Contiguous partition of bus positions into `groups` parts whose sizes
/// differ by at most one (larger parts first).
pub fn make_groups(n_bus: usize, groups: usize) -> Result<Vec<Vec<usize>>, NnetError> {
    if groups == 0 || groups > n_bus {
        return Err(NnetError::Groups { buses: n_bus, groups });
    }
    let base = n_bus / groups;
    let extra = n_bus % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        out.push((start..start + size).collect());
        start += size;
    }
    Ok(out)
}

/// Trains one network on columns of `x`/`y`; returns the full-set loss
/// before training and after every epoch.
pub fn fit_mlp(
    params: &mut MlpParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    label: (&'static str, usize),
) -> Result<Vec<f64>, NnetError> {
    let n = x.ncols();
    let mut state = AdamState::new(params);
    let mut losses = Vec::with_capacity(cfg.max_epochs + 1);
    losses.push(mse_loss(&params.forward(x)?, y));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_epochs {
        let step_cfg = TrainConfig {
            learning_rate: cfg.learning_rate_at(epoch),
            ..*cfg
        };
        order.shuffle(rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_columns(chunk);
            let yb = y.select_columns(chunk);
            let (loss, grads) = params.backward(&xb, &yb)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite())) {
                return Err(NnetError::NonFinite {
                    net: label.0,
                    group: label.1,
                    epoch,
                    batch,
                });
            }
            adam_step(params, &grads, &mut state, &step_cfg);
        }
        let loss = mse_loss(&params.forward(x)?, y);
        if !loss.is_finite() {
            return Err(NnetError::NonFinite {
                net: label.0,
                group: label.1,
                epoch,
                batch: n.div_ceil(cfg.batch_size),
            });
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltagePredictor {
    pub groups: Vec<Vec<usize>>,
    pub vmp: Vec<MlpParams>,
    pub vap: Vec<MlpParams>,
    pub scaler: Scaler,
    pub reference_bus: usize,
    pub bus_ids: Vec<u32>,
    pub case_fingerprint: String,
    /// Mean training target, the default linearization point for correction.
    pub anchor: VoltageState,
    pub train_config: TrainConfig,
    #[serde(default)]
    pub target_scale: Option<TargetScale>,
}

/// Per-bus affine map from network outputs back to `vm − 1` and `va`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub offset: VoltageState,
    pub scale: VoltageState,
}

impl TargetScale {
    fn fit(train: &[&crate::dataset::Sample]) -> TargetScale {
        let n = train[0].target_state.len();
        let count = train.len() as f64;
        let mut offset = VoltageState { vm: vec![0.0; n], va: vec![0.0; n] };
        let mut scale = offset.clone();
        for s in train {
            for i in 0..n {
                offset.vm[i] += (s.target_state.vm[i] - crate::dataset::VM_CENTER) / count;
                offset.va[i] += s.target_state.va[i] / count;
            }
        }
        for s in train {
            for i in 0..n {
                scale.vm[i] += (s.target_state.vm[i] - crate::dataset::VM_CENTER - offset.vm[i]).powi(2) / count;
                scale.va[i] += (s.target_state.va[i] - offset.va[i]).powi(2) / count;
            }
        }
        let fix = |v: &mut f64| *v = if *v > 0.0 { v.sqrt() } else { 1.0 };
        scale.vm.iter_mut().chain(scale.va.iter_mut()).for_each(fix);
        TargetScale { offset, scale }
    }
}

/// Per-epoch training losses, indexed `[group][epoch]` with the untrained
/// loss at position 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub vmp: Vec<Vec<f64>>,
    pub vap: Vec<Vec<f64>>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train(
    ds: &Dataset,
    net: &Network,
    hidden_dims: &[usize],
    cfg: &TrainConfig,
) -> Result<(VoltagePredictor, TrainLog), NnetError> {
    cfg.validate()?;
    ds.check_case(net)?;
    let scaler = ds.scaler.clone().ok_or(DatasetError::NoSplit)?;
    let train = ds.train_samples()?;
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain.into());
    }
    let n = net.n_bus();
    let groups = make_groups(n, cfg.bus_groups)?;
    let input_dim = 2 * n;
    let x = DMatrix::from_fn(input_dim, train.len(), |_, _| 0.0);
    let mut x = x;
    for (c, s) in train.iter().enumerate() {
        x.set_column(c, &DVector::from_vec(scaler.apply_input(&s.loads)));
    }
    let anchor = VoltageState::mean(train.iter().map(|s| &s.target_state)).expect("train split is nonempty");
    let target_scale = cfg.standardize_targets.then(|| TargetScale::fit(&train));

    struct Job {
        kind: usize,
        group: usize,
    }
    let jobs: Vec<Job> = (0..groups.len())
        .flat_map(|g| [Job { kind: 0, group: g }, Job { kind: 1, group: g }])
        .collect();
    let run = |job: &Job| -> Result<(MlpParams, Vec<f64>), NnetError> {
        let buses = &groups[job.group];
        let y = DMatrix::from_fn(buses.len(), train.len(), |r, c| {
            let st = &train[c].target_state;
            let b = buses[r];
            let raw = if job.kind == 0 { st.vm[b] - crate::dataset::VM_CENTER } else { st.va[b] };
            match &target_scale {
                None => raw,
                Some(ts) if job.kind == 0 => (raw - ts.offset.vm[b]) / ts.scale.vm[b],
                Some(ts) => (raw - ts.offset.va[b]) / ts.scale.va[b],
            }
        });
        let spec = MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim: buses.len(),
        };
        let stream = 2 * job.group as u64 + job.kind as u64;
        let mut params = init_with(&spec, &mut stream_rng(cfg.seed, 2 * stream))?;
        let name = if job.kind == 0 { "VMP" } else { "VAP" };
        let losses = fit_mlp(
            &mut params,
            &x,
            &y,
            cfg,
            &mut stream_rng(cfg.seed, 2 * stream + 1),
            (name, job.group),
        )?;
        Ok((params, losses))
    };
    let results = run_jobs(&jobs, run)?;

    let mut vmp = Vec::new();
    let mut vap = Vec::new();
    let mut log = TrainLog { vmp: vec![], vap: vec![] };
    for (job, (params, losses)) in jobs.iter().zip(results) {
        if job.kind == 0 {
            vmp.push(params);
            log.vmp.push(losses);
        } else {
            vap.push(params);
            log.vap.push(losses);
        }
    }
    Ok((
        VoltagePredictor {
            groups,
            vmp,
            vap,
            scaler,
            reference_bus: net.reference_bus(),
            bus_ids: net.bus_ids(),
            case_fingerprint: ds.case_fingerprint.clone(),
            anchor,
            train_config: *cfg,
            target_scale,
        },
        log,
    ))
}

#[cfg(feature = "parallel")]
fn run_jobs<J: Sync, T: Send>(
    jobs: &[J],
    run: impl Fn(&J) -> Result<T, NnetError> + Sync + Send,
) -> Result<Vec<T>, NnetError> {
    use rayon::prelude::*;
    jobs.par_iter().map(run).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<J, T>(jobs: &[J], run: impl Fn(&J) -> Result<T, NnetError>) -> Result<Vec<T>, NnetError> {
    jobs.iter().map(run).collect()
}

impl VoltagePredictor {
    pub fn check_case(&self, net: &Network) -> Result<(), NnetError> {
        let expected = net.fingerprint();
        if expected != self.case_fingerprint {
            return Err(NnetError::Fingerprint {
                expected,
                found: self.case_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn n_bus(&self) -> usize {
        self.bus_ids.len()
    }

    /// Predicted voltages with the reference angle shifted to zero.
    pub fn predict_voltages(&self, loads: &Loads) -> Result<VoltageState, NnetError> {
        let n = self.n_bus();
        if loads.pd.len() != n || loads.qd.len() != n {
            return Err(NnetError::Width {
                expected: n,
                got: loads.pd.len().min(loads.qd.len()),
            });
        }
        let x = self.scaler.apply_input(loads);
        let mut state = VoltageState::flat(n);
        for (g, buses) in self.groups.iter().enumerate() {
            let vm = self.vmp[g].forward_one(&x)?;
            let va = self.vap[g].forward_one(&x)?;
            for (k, &b) in buses.iter().enumerate() {
                let (dm, da) = match &self.target_scale {
                    None => (vm[k], va[k]),
                    Some(ts) => (
                        ts.offset.vm[b] + ts.scale.vm[b] * vm[k],
                        ts.offset.va[b] + ts.scale.va[b] * va[k],
                    ),
                };
                state.vm[b] = dm + crate::dataset::VM_CENTER;
                state.va[b] = da;
            }
        }
        state.rezero(self.reference_bus);
        Ok(state)
    }

    pub fn to_json(&self) -> Result<String, NnetError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NnetError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(i: usize, h: &[usize], o: usize) -> MlpSpec {
        MlpSpec {
            input_dim: i,
            hidden_dims: h.to_vec(),
            output_dim: o,
        }
    }

    fn loss_of(p: &MlpParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        mse_loss(&p.forward(x).unwrap(), y)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut p = init_mlp(&spec(3, &[4], 2), 1).unwrap();
        for l in &mut p.layers {
            l.weight.fill(0.0);
        }
        let out = p.forward(&DMatrix::from_element(3, 5, 1.7)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let p = MlpParams {
            spec: spec(1, &[], 1),
            layers: vec![Layer {
                weight: DMatrix::from_element(1, 1, 2.0),
                bias: DVector::from_element(1, 1.0),
            }],
        };
        assert_eq!(p.forward_one(&[3.0]).unwrap(), vec![7.0]);
        assert!(matches!(p.forward_one(&[3.0, 1.0]), Err(NnetError::Width { .. })));
    }

    #[test]
    fn hand_built_two_layer_forward() {
        // hidden = relu([[1,2],[-1,1],[0.5,-0.5]]·x + [0.1,0.2,-0.3])
        // out = [[1,-2,3]]·hidden + [0.5]
        let p = MlpParams {
            spec: spec(2, &[3], 1),
            layers: vec![
                Layer {
                    weight: DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 1.0, 0.5, -0.5]),
                    bias: DVector::from_vec(vec![0.1, 0.2, -0.3]),
                },
                Layer {
                    weight: DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 3.0]),
                    bias: DVector::from_vec(vec![0.5]),
                },
            ],
        };
        // x = [1,-1]: pre = [-0.9, -1.8, 0.7] → relu [0,0,0.7] → 2.1 + 0.5
        let out = p.forward_one(&[1.0, -1.0]).unwrap();
        assert!((out[0] - 2.6).abs() < 1e-15);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let s = spec(5, &[7, 3], 2);
        let a = init_mlp(&s, 11).unwrap();
        assert_eq!(a, init_mlp(&s, 11).unwrap());
        assert_ne!(a, init_mlp(&s, 12).unwrap());
        for l in &a.layers {
            let limit = (6.0 / (l.weight.ncols() + l.weight.nrows()) as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= limit));
            assert!(l.bias.iter().all(|b| *b == 0.0));
        }
        let direct = init_mlp(&spec(3, &[], 3), 0).unwrap();
        assert_eq!(direct.layers.len(), 1);
        assert!(init_mlp(&spec(0, &[], 1), 0).is_err());
    }

    #[test]
    fn mse_conventions() {
        let a = DMatrix::from_element(4, 3, 0.25);
        assert_eq!(mse_loss(&a, &a), 0.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(mse_loss(&b, &a), 4.0);
        // (1, 2 | 0, -3) vs zeros: sample sums 1 and 13, mean 7
        let p = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 2.0, -3.0]);
        assert_eq!(mse_loss(&p, &DMatrix::zeros(2, 2)), 7.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let p = init_mlp(&spec(3, &[4], 2), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
            let y = DMatrix::from_fn(2, 6, |_, _| rng.gen_range(-1.0..1.0));
            let (_, grads) = p.backward(&x, &y).unwrap();
            let h = 1e-6;
            for k in 0..p.layers.len() {
                for idx in 0..p.layers[k].weight.len() + p.layers[k].bias.len() {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    let nw = p.layers[k].weight.len();
                    let (analytic, slot_p, slot_m) = if idx < nw {
                        (
                            grads[k].weight.as_slice()[idx],
                            &mut plus.layers[k].weight.as_mut_slice()[idx],
                            &mut minus.layers[k].weight.as_mut_slice()[idx],
                        )
                    } else {
                        (
                            grads[k].bias[idx - nw],
                            &mut plus.layers[k].bias.as_mut_slice()[idx - nw],
                            &mut minus.layers[k].bias.as_mut_slice()[idx - nw],
                        )
                    };
                    *slot_p += h;
                    *slot_m -= h;
                    let fd = (loss_of(&plus, &x, &y) - loss_of(&minus, &x, &y)) / (2.0 * h);
                    let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
                    assert!(rel <= 1e-5, "seed {seed} layer {k} idx {idx}: {analytic} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn output_bias_gradient_is_twice_mean_error() {
        let p = MlpParams {
            spec: spec(1, &[], 1),
            layers: vec![Layer {
                weight: DMatrix::from_element(1, 1, 0.0),
                bias: DVector::from_element(1, 0.0),
            }],
        };
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let y = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 4.0]);
        let (_, g) = p.backward(&x, &y).unwrap();
        // ŷ = 0, mean(ŷ − y) = −1
        assert!((g[0].bias[0] + 2.0).abs() < 1e-15);
        let (loss, g0) = p.backward(&x, &DMatrix::zeros(1, 3)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g0.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == 0.0)));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = init_mlp(&spec(2, &[3], 1), 5).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zeros: Vec<Layer> = p.layers.iter().map(Layer::zeros_like).collect();
        adam_step(&mut p, &zeros, &mut st, &TrainConfig::default());
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
        assert!(st.m.iter().chain(&st.v).all(|l| l.weight.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn adam_first_step_hand_value() {
        // m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
        let g = 0.3;
        let lr = 1e-3;
        let eps = 1e-8;
        let mut p = MlpParams {
            spec: spec(1, &[], 1),
            layers: vec![Layer {
                weight: DMatrix::from_element(1, 1, 1.0),
                bias: DVector::from_element(1, -2.0),
            }],
        };
        let grads = vec![Layer {
            weight: DMatrix::from_element(1, 1, g),
            bias: DVector::from_element(1, -g),
        }];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, &TrainConfig::default());
        let step = lr * g / (g + eps);
        assert!((p.layers[0].weight[(0, 0)] - (1.0 - step)).abs() < 1e-10);
        assert!((p.layers[0].bias[0] - (-2.0 + step)).abs() < 1e-10);
        assert!((step - lr).abs() < 1e-10);
    }

    #[test]
    fn groups_are_even_and_contiguous() {
        let g = make_groups(2000, 10).unwrap();
        assert!(g.iter().all(|p| p.len() == 200));
        assert_eq!(make_groups(5, 1).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(make_groups(5, 2).unwrap(), vec![vec![0, 1, 2], vec![3, 4]]);
        assert!(make_groups(3, 4).is_err());
        assert!(make_groups(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn groups_cover_every_bus_once(n in 1usize..300, k in 1usize..20) {
            prop_assume!(k <= n);
            let g = make_groups(n, k).unwrap();
            let flat: Vec<usize> = g.iter().flatten().copied().collect();
            prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = g.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn linear_task_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let x = DMatrix::from_fn(4, 256, |_, _| rng.gen_range(0.0..1.0));
        let y = &a * &x;
        let mut p = init_mlp(&spec(4, &[16], 2), 9).unwrap();
        let cfg = TrainConfig {
            max_epochs: 200,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let losses = fit_mlp(&mut p, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(1), ("test", 0)).unwrap();
        assert_eq!(losses.len(), 201);
        assert!(losses[200] <= 0.01 * losses[0], "{} vs {}", losses[200], losses[0]);
    }

    #[test]
    fn params_json_round_trip_is_row_major_and_exact() {
        let p = init_mlp(&spec(3, &[2], 1), 4).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        let first_row = &raw["layers"][0]["weight"];
        assert_eq!(first_row[1].as_f64().unwrap(), p.layers[0].weight[(0, 1)]);
        let back: MlpParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
