//! Reconstruction of a full operating point from bus voltages, and the
//! linearized pseudo-inverse repair of inequality violations.
//!
//! Power balance holds by construction: generation at generator buses and
//! served demand at load buses are read off the injections the voltages imply.
//! Buses with neither generation nor load cannot absorb a nonzero injection,
//! which is reported as a mismatch instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{self, bus_injections, flow_jacobian, injection_jacobian, objective_cost, AcpfError, BranchFlow, VoltageState};
use crate::netmodel::{Loads, Network};

#[derive(Debug, Error, PartialEq)]
pub enum ReconError {
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error("no anchor states given")]
    NoAnchor,
    #[error("constraint Jacobian is identically zero")]
    ZeroJacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Generator,
    Load,
    Both,
    Neither,
}

pub fn bus_kinds(net: &Network, loads: &Loads) -> Vec<BusKind> {
    (0..net.n_bus())
        .map(|i| match (net.has_generator(i), loads.has_load(i)) {
            (true, false) => BusKind::Generator,
            (false, true) => BusKind::Load,
            (true, true) => BusKind::Both,
            (false, false) => BusKind::Neither,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedPoint {
    pub state: VoltageState,
    pub pg_bus: Vec<f64>,
    pub qg_bus: Vec<f64>,
    pub pd_hat: Vec<f64>,
    pub qd_hat: Vec<f64>,
    pub flows: BranchFlow,
    pub objective: f64,
    /// Injection left at buses without generation or load.
    pub mismatch_p: Vec<f64>,
    pub mismatch_q: Vec<f64>,
}

pub fn reconstruct(net: &Network, loads: &Loads, state: &VoltageState) -> Result<ReconstructedPoint, AcpfError> {
    let n = net.n_bus();
    if loads.pd.len() != n || loads.qd.len() != n {
        return Err(AcpfError::Dimension {
            expected: n,
            got: loads.pd.len().min(loads.qd.len()),
        });
    }
    let inj = bus_injections(net, state)?;
    let flows = acpf::branch_flows(net, state)?;
    let mut pt = ReconstructedPoint {
        state: state.clone(),
        pg_bus: vec![0.0; n],
        qg_bus: vec![0.0; n],
        pd_hat: vec![0.0; n],
        qd_hat: vec![0.0; n],
        flows,
        objective: 0.0,
        mismatch_p: vec![0.0; n],
        mismatch_q: vec![0.0; n],
    };
    for (i, kind) in bus_kinds(net, loads).into_iter().enumerate() {
        let (p, q) = (inj.p[i], inj.q[i]);
        match kind {
            BusKind::Generator => {
                pt.pg_bus[i] = p;
                pt.qg_bus[i] = q;
            }
            BusKind::Load => {
                pt.pd_hat[i] = -p;
                pt.qd_hat[i] = -q;
            }
            BusKind::Both => {
                pt.pd_hat[i] = loads.pd[i];
                pt.qd_hat[i] = loads.qd[i];
                pt.pg_bus[i] = p + loads.pd[i];
                pt.qg_bus[i] = q + loads.qd[i];
            }
            BusKind::Neither => {
                pt.mismatch_p[i] = p;
                pt.mismatch_q[i] = q;
            }
        }
    }
    pt.objective = objective_cost(net, &generator_dispatch(net, &pt.pg_bus))?;
    Ok(pt)
}

/// Splits bus-level generation across co-located units in proportion to
/// their `pmax` (evenly when every `pmax` at the bus is zero).
pub fn generator_dispatch(net: &Network, bus_values: &[f64]) -> Vec<f64> {
    let gens = net.generators();
    let mut out = vec![0.0; gens.len()];
    for (i, &total) in bus_values.iter().enumerate() {
        let at = net.generators_at(i);
        if at.is_empty() {
            continue;
        }
        let cap: f64 = at.iter().map(|&k| gens[k].pmax).sum();
        for &k in at {
            out[k] = if cap > 0.0 {
                total * gens[k].pmax / cap
            } else {
                total / at.len() as f64
            };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    Vm,
    Pg,
    Qg,
    Flow,
    Angle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RowKind {
    Pg { bus: usize },
    Qg { bus: usize },
    Vm { bus: usize },
    FlowFrom { branch: usize },
    FlowTo { branch: usize },
    Angle { branch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub kind: RowKind,
    pub lower: f64,
    pub upper: f64,
}

impl ConstraintRow {
    pub fn class(&self) -> ConstraintClass {
        match self.kind {
            RowKind::Pg { .. } => ConstraintClass::Pg,
            RowKind::Qg { .. } => ConstraintClass::Qg,
            RowKind::Vm { .. } => ConstraintClass::Vm,
            RowKind::FlowFrom { .. } | RowKind::FlowTo { .. } => ConstraintClass::Flow,
            RowKind::Angle { .. } => ConstraintClass::Angle,
        }
    }
}

/// Inequality rows in fixed order: bus generation P then Q (generator buses,
/// bounds aggregated over co-located units), every magnitude, both ends of
/// every rated branch, every branch angle difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintLayout {
    pub rows: Vec<ConstraintRow>,
}

impl ConstraintLayout {
    pub fn new(net: &Network) -> Self {
        let mut rows = Vec::new();
        let gens = net.generators();
        let gen_buses: Vec<usize> = (0..net.n_bus()).filter(|&i| net.has_generator(i)).collect();
        for &bus in &gen_buses {
            let at = net.generators_at(bus);
            rows.push(ConstraintRow {
                kind: RowKind::Pg { bus },
                lower: at.iter().map(|&k| gens[k].pmin).sum(),
                upper: at.iter().map(|&k| gens[k].pmax).sum(),
            });
        }
        for &bus in &gen_buses {
            let at = net.generators_at(bus);
            rows.push(ConstraintRow {
                kind: RowKind::Qg { bus },
                lower: at.iter().map(|&k| gens[k].qmin).sum(),
                upper: at.iter().map(|&k| gens[k].qmax).sum(),
            });
        }
        for (bus, b) in net.buses().iter().enumerate() {
            rows.push(ConstraintRow {
                kind: RowKind::Vm { bus },
                lower: b.vmin,
                upper: b.vmax,
            });
        }
        for (branch, br) in net.branches().iter().enumerate() {
            if br.smax > 0.0 {
                for kind in [RowKind::FlowFrom { branch }, RowKind::FlowTo { branch }] {
                    rows.push(ConstraintRow {
                        kind,
                        lower: 0.0,
                        upper: br.smax,
                    });
                }
            }
        }
        for (branch, br) in net.branches().iter().enumerate() {
            rows.push(ConstraintRow {
                kind: RowKind::Angle { branch },
                lower: br.theta_min,
                upper: br.theta_max,
            });
        }
        ConstraintLayout { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self, net: &Network, pt: &ReconstructedPoint) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match r.kind {
                RowKind::Pg { bus } => pt.pg_bus[bus],
                RowKind::Qg { bus } => pt.qg_bus[bus],
                RowKind::Vm { bus } => pt.state.vm[bus],
                RowKind::FlowFrom { branch } => pt.flows.s_from[branch],
                RowKind::FlowTo { branch } => pt.flows.s_to[branch],
                RowKind::Angle { branch } => {
                    let (f, t) = net.branch_ends(branch);
                    pt.state.va[f] - pt.state.va[t]
                }
            })
            .collect()
    }

    /// `Δf = max(f − f̄, 0) + min(f − f_, 0)` per row.
    pub fn violations(&self, values: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(values)
            .map(|(r, &f)| (f - r.upper).max(0.0) + (f - r.lower).min(0.0))
            .collect()
    }

    /// Constraint Jacobian with respect to `[va (reference removed), vm]`.
    pub fn jacobian(&self, net: &Network, state: &VoltageState) -> Result<DMatrix<f64>, AcpfError> {
        let n = net.n_bus();
        let reference = net.reference_bus();
        let col_of = |bus: usize| (bus != reference).then(|| if bus < reference { bus } else { bus - 1 });
        let inj = injection_jacobian(net, state)?;
        let flow = flow_jacobian(net, state)?;
        let nb = net.n_branch();
        let mut jac = DMatrix::zeros(self.len(), 2 * n - 1);
        let copy_row = |jac: &mut DMatrix<f64>, r: usize, src: &DMatrix<f64>, sr: usize| {
            for bus in 0..n {
                if let Some(c) = col_of(bus) {
                    jac[(r, c)] = src[(sr, bus)];
                }
                jac[(r, n - 1 + bus)] = src[(sr, n + bus)];
            }
        };
        for (r, row) in self.rows.iter().enumerate() {
            match row.kind {
                RowKind::Pg { bus } => copy_row(&mut jac, r, &inj, bus),
                RowKind::Qg { bus } => copy_row(&mut jac, r, &inj, n + bus),
                RowKind::Vm { bus } => jac[(r, n - 1 + bus)] = 1.0,
                RowKind::FlowFrom { branch } => copy_row(&mut jac, r, &flow.matrix, branch),
                RowKind::FlowTo { branch } => copy_row(&mut jac, r, &flow.matrix, nb + branch),
                RowKind::Angle { branch } => {
                    let (f, t) = net.branch_ends(branch);
                    if let Some(c) = col_of(f) {
                        jac[(r, c)] += 1.0;
                    }
                    if let Some(c) = col_of(t) {
                        jac[(r, c)] -= 1.0;
                    }
                }
            }
        }
        Ok(jac)
    }
}

pub fn violation_vector(net: &Network, layout: &ConstraintLayout, pt: &ReconstructedPoint) -> Vec<f64> {
    layout.violations(&layout.values(net, pt))
}

pub const DEFAULT_RTOL: f64 = 1e-10;

/// Moore–Penrose pseudo-inverse by SVD, dropping singular values below
/// `rtol·σ_max`.
pub fn pinv(matrix: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    if matrix.is_empty() {
        return DMatrix::zeros(matrix.ncols(), matrix.nrows());
    }
    let svd = matrix.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(matrix.ncols(), matrix.nrows());
    }
    let cutoff = rtol * smax;
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let inv_s = svd.singular_values.map(|s| if s > cutoff { 1.0 / s } else { 0.0 });
    let mut vs = vt.transpose();
    for (c, w) in inv_s.iter().enumerate() {
        vs.column_mut(c).scale_mut(*w);
    }
    vs * u.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionModel {
    pub layout: ConstraintLayout,
    pub jacobian: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
    pub anchor: VoltageState,
}

/// Linearizes the constraints at the elementwise mean of `anchors`.
pub fn build_correction_model<'a>(
    net: &Network,
    anchors: impl IntoIterator<Item = &'a VoltageState>,
) -> Result<CorrectionModel, ReconError> {
    let anchor = VoltageState::mean(anchors).ok_or(ReconError::NoAnchor)?;
    correction_model_at(net, anchor)
}

pub fn correction_model_at(net: &Network, anchor: VoltageState) -> Result<CorrectionModel, ReconError> {
    let layout = ConstraintLayout::new(net);
    let jacobian = layout.jacobian(net, &anchor)?;
    if jacobian.iter().all(|v| *v == 0.0) {
        return Err(ReconError::ZeroJacobian);
    }
    let pinv = pinv(&jacobian, DEFAULT_RTOL);
    Ok(CorrectionModel {
        layout,
        jacobian,
        pinv,
        anchor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpMode {
    Off,
    Historical,
    Exact,
}

impl std::str::FromStr for PpMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(PpMode::Off),
            "historical" => Ok(PpMode::Historical),
            "exact" => Ok(PpMode::Exact),
            other => Err(format!("unknown post-processing mode '{other}' (off, historical, exact)")),
        }
    }
}

impl std::fmt::Display for PpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PpMode::Off => "off",
            PpMode::Historical => "historical",
            PpMode::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostProcessConfig {
    pub mode: PpMode,
    pub damping: f64,
    pub max_rounds: usize,
    /// Apply `+F⁺Δf` instead of the bound-restoring `−F⁺Δf`.
    pub literal_sign: bool,
    pub rtol: f64,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        PostProcessConfig {
            mode: PpMode::Historical,
            damping: 1.0,
            max_rounds: 1,
            literal_sign: false,
            rtol: DEFAULT_RTOL,
        }
    }
}

/// Moves the voltages along `∓damping·F⁺Δf`, clamps magnitudes into their box
/// and reconstructs, for up to `max_rounds` rounds.
pub fn post_process(
    net: &Network,
    loads: &Loads,
    point: &ReconstructedPoint,
    model: &CorrectionModel,
    cfg: &PostProcessConfig,
) -> Result<ReconstructedPoint, AcpfError> {
    let mut pt = point.clone();
    if cfg.mode == PpMode::Off {
        return Ok(pt);
    }
    let n = net.n_bus();
    let reference = net.reference_bus();
    for _ in 0..cfg.max_rounds {
        let df = violation_vector(net, &model.layout, &pt);
        if df.iter().all(|v| *v == 0.0) {
            break;
        }
        let exact;
        let p = match cfg.mode {
            PpMode::Exact => {
                exact = pinv(&model.layout.jacobian(net, &pt.state)?, cfg.rtol);
                &exact
            }
            _ => &model.pinv,
        };
        let sign = if cfg.literal_sign { 1.0 } else { -1.0 };
        let dx = p * DVector::from_vec(df) * (sign * cfg.damping);
        let mut state = pt.state.clone();
        let mut c = 0;
        for bus in 0..n {
            if bus != reference {
                state.va[bus] += dx[c];
                c += 1;
            }
        }
        for (bus, b) in net.buses().iter().enumerate() {
            state.vm[bus] = (state.vm[bus] + dx[n - 1 + bus]).clamp(b.vmin, b.vmax);
        }
        pt = reconstruct(net, loads, &state)?;
    }
    Ok(pt)
}
