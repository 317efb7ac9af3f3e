//! Ground-truth solvers: Newton–Raphson power flow and a primal-dual
//! interior-point AC-OPF.
//!
//! The OPF follows the usual MIPS-style iteration: inequalities `h(x) ≤ 0`
//! get slacks `z > 0` with multipliers `μ`, equalities `g(x) = 0` get `λ`, and
//! each iteration solves the condensed Newton system
//!
//! ```text
//! [ Lxx + Jhᵀ·diag(μ/z)·Jh   Jgᵀ ] [Δx]   [ -(Lx + Jhᵀ·(μ∘h + γ)/z) ]
//! [ Jg                       0   ] [Δλ] = [ -g                      ]
//! ```
//!
//! Decision vector layout: angles of every non-reference bus, all magnitudes,
//! then active and reactive generator outputs. Branch ratings enter in squared
//! form `p² + q² ≤ s_max²`, which has the same feasible set as the magnitude
//! form and stays smooth at zero flow.

use std::f64::consts::PI;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{self, bus_injections, injection_jacobian, objective_cost, EndPower, VoltageState};
use crate::netmodel::{Loads, Network};
use crate::timer::Stopwatch;

/// Internal objective multiplier; keeps multipliers near unit scale.
const COST_SCALE: f64 = 1e-4;
/// Fraction-to-boundary factor.
const XI: f64 = 0.99995;
/// Centering parameter.
const SIGMA: f64 = 0.1;
const PF_TOL: f64 = 1e-8;
const PF_MAX_ITER: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_mu: f64,
    pub step_reduction: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-6,
            max_iter: 150,
            initial_mu: 1.0,
            step_reduction: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tol > 0.0) {
            return Err(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter < 1 {
            return Err("max_iter must be at least 1".into());
        }
        if !(self.step_reduction > 0.0 && self.step_reduction < 1.0) {
            return Err(format!(
                "step_reduction must lie in (0, 1), got {}",
                self.step_reduction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpfStatus {
    Converged,
    MaxIter,
    Infeasible,
}

/// Scaled KKT measures, each compared against `SolverConfig::tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `max(‖g‖∞, max(h)⁺)` in p.u. / rad.
    pub feasibility: f64,
    /// `‖∇L‖∞ / (1 + max(‖λ‖∞, ‖μ‖∞))`.
    pub stationarity: f64,
    /// `zᵀμ / (1 + ‖x‖∞)`.
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.feasibility
            .max(self.stationarity)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfDuals {
    pub lam: Vec<f64>,
    pub mu: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub state: VoltageState,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub objective: f64,
    pub status: OpfStatus,
    pub solve_time: f64,
    pub iterations: usize,
    pub kkt: KktResidual,
    pub duals: OpfDuals,
}

impl OpfSolution {
    pub fn converged(&self) -> bool {
        self.status == OpfStatus::Converged
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("power-flow Jacobian is singular at iteration {0}")]
    SingularJacobian(usize),
    #[error("power flow did not converge in {0} iterations (mismatch {1:e})")]
    NoConvergence(usize, f64),
    #[error("{0}")]
    Dimension(#[from] acpf::AcpfError),
    #[error("network has no unique reference bus")]
    NoReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    pub state: VoltageState,
    pub iterations: usize,
}

/// Newton–Raphson power flow with the reference bus as slack and every other
/// generator bus held at its magnitude set-point.
pub fn solve_power_flow(
    net: &Network,
    loads: &Loads,
    pg_setpoints: &[f64],
    vm_setpoints: &[f64],
    initial: &VoltageState,
) -> Result<PowerFlowResult, PowerFlowError> {
    let n = net.n_bus();
    let reference = net.try_reference_bus().ok_or(PowerFlowError::NoReference)?;
    for (expected, got) in [
        (n, loads.pd.len()),
        (n, loads.qd.len()),
        (net.n_gen(), pg_setpoints.len()),
        (n, vm_setpoints.len()),
        (n, initial.len()),
    ] {
        if expected != got {
            return Err(acpf::AcpfError::Dimension { expected, got }.into());
        }
    }
    let p_spec: Vec<f64> = (0..n)
        .map(|i| {
            net.generators_at(i)
                .iter()
                .map(|&g| pg_setpoints[g])
                .sum::<f64>()
                - loads.pd[i]
        })
        .collect();
    let q_spec: Vec<f64> = loads.qd.iter().map(|q| -q).collect();
    let is_pv = |i: usize| i != reference && net.has_generator(i);
    let angle_buses: Vec<usize> = (0..n).filter(|&i| i != reference).collect();
    let pq_buses: Vec<usize> = (0..n).filter(|&i| i != reference && !is_pv(i)).collect();

    let mut state = initial.clone();
    for i in 0..n {
        if i == reference || is_pv(i) {
            state.vm[i] = vm_setpoints[i];
        }
    }
    state.va[reference] = 0.0;

    let dim = angle_buses.len() + pq_buses.len();
    for iter in 0..=PF_MAX_ITER {
        let inj = bus_injections(net, &state)?;
        let mut mis = DVector::zeros(dim);
        for (r, &i) in angle_buses.iter().enumerate() {
            mis[r] = inj.p[i] - p_spec[i];
        }
        for (r, &i) in pq_buses.iter().enumerate() {
            mis[angle_buses.len() + r] = inj.q[i] - q_spec[i];
        }
        let worst = mis.amax();
        if worst <= PF_TOL {
            return Ok(PowerFlowResult {
                state,
                iterations: iter,
            });
        }
        if iter == PF_MAX_ITER {
            return Err(PowerFlowError::NoConvergence(iter, worst));
        }
        let full = injection_jacobian(net, &state)?;
        let rows: Vec<usize> = angle_buses
            .iter()
            .copied()
            .chain(pq_buses.iter().map(|&i| n + i))
            .collect();
        let cols = rows.clone();
        let jac = DMatrix::from_fn(dim, dim, |r, c| full[(rows[r], cols[c])]);
        let step = jac
            .lu()
            .solve(&(-mis))
            .ok_or(PowerFlowError::SingularJacobian(iter))?;
        for (r, &i) in angle_buses.iter().enumerate() {
            state.va[i] += step[r];
        }
        for (r, &i) in pq_buses.iter().enumerate() {
            state.vm[i] += step[angle_buses.len() + r];
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Angle bounds at or beyond ±360° are treated as absent.
fn angle_limit_active(bound: f64) -> bool {
    bound.abs() < 2.0 * PI - 1e-9
}

/// Problem structure over which the interior-point iteration runs.
struct OpfProblem<'a> {
    net: &'a Network,
    loads: &'a Loads,
    nb: usize,
    ng: usize,
    nx: usize,
    va_col: Vec<Option<usize>>,
    rated: Vec<usize>,
    angle_upper: Vec<usize>,
    angle_lower: Vec<usize>,
}

impl<'a> OpfProblem<'a> {
    fn new(net: &'a Network, loads: &'a Loads) -> Self {
        let nb = net.n_bus();
        let ng = net.n_gen();
        let reference = net.reference_bus();
        let mut va_col = vec![None; nb];
        let mut c = 0;
        for (i, slot) in va_col.iter_mut().enumerate() {
            if i != reference {
                *slot = Some(c);
                c += 1;
            }
        }
        let rated = (0..net.n_branch())
            .filter(|&k| net.branches()[k].smax > 0.0)
            .collect();
        let angle_upper = (0..net.n_branch())
            .filter(|&k| angle_limit_active(net.branches()[k].theta_max))
            .collect();
        let angle_lower = (0..net.n_branch())
            .filter(|&k| angle_limit_active(net.branches()[k].theta_min))
            .collect();
        OpfProblem {
            net,
            loads,
            nb,
            ng,
            nx: 2 * nb - 1 + 2 * ng,
            va_col,
            rated,
            angle_upper,
            angle_lower,
        }
    }

    fn vm_col(&self, i: usize) -> usize {
        self.nb - 1 + i
    }

    fn pg_col(&self, k: usize) -> usize {
        2 * self.nb - 1 + k
    }

    fn qg_col(&self, k: usize) -> usize {
        2 * self.nb - 1 + self.ng + k
    }

    fn n_eq(&self) -> usize {
        2 * self.nb
    }

    fn n_ineq(&self) -> usize {
        2 * self.rated.len()
            + self.angle_upper.len()
            + self.angle_lower.len()
            + 2 * self.nb
            + 4 * self.ng
    }

    fn state(&self, x: &DVector<f64>) -> VoltageState {
        let va = self
            .va_col
            .iter()
            .map(|c| c.map_or(0.0, |c| x[c]))
            .collect();
        let vm = (0..self.nb).map(|i| x[self.vm_col(i)]).collect();
        VoltageState { vm, va }
    }

    fn pack(&self, state: &VoltageState, pg: &[f64], qg: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.nx);
        for i in 0..self.nb {
            if let Some(c) = self.va_col[i] {
                x[c] = state.va[i];
            }
            x[self.vm_col(i)] = state.vm[i];
        }
        for k in 0..self.ng {
            x[self.pg_col(k)] = pg[k];
            x[self.qg_col(k)] = qg[k];
        }
        x
    }

    fn dispatch(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        (
            (0..self.ng).map(|k| x[self.pg_col(k)]).collect(),
            (0..self.ng).map(|k| x[self.qg_col(k)]).collect(),
        )
    }

    fn initial_point(&self) -> DVector<f64> {
        let mut state = VoltageState::flat(self.nb);
        for (i, b) in self.net.buses().iter().enumerate() {
            state.vm[i] = 1.0_f64.clamp(b.vmin, b.vmax);
        }
        let gens = self.net.generators();
        let pg: Vec<f64> = gens.iter().map(|g| 0.5 * (g.pmin + g.pmax)).collect();
        let qg: Vec<f64> = gens.iter().map(|g| 0.5 * (g.qmin + g.qmax)).collect();
        self.pack(&state, &pg, &qg)
    }

    // ---- objective ----

    fn cost(&self, x: &DVector<f64>) -> f64 {
        let (pg, _) = self.dispatch(x);
        objective_cost(self.net, &pg).expect("dimension fixed by construction") * COST_SCALE
    }

    fn cost_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let base = self.net.base_mva();
        let mut grad = DVector::zeros(self.nx);
        for (k, g) in self.net.generators().iter().enumerate() {
            let mw = x[self.pg_col(k)] * base;
            grad[self.pg_col(k)] = COST_SCALE * base * (2.0 * g.cost.c2 * mw + g.cost.c1);
        }
        grad
    }

    // ---- equalities ----

    fn equalities(&self, x: &DVector<f64>) -> DVector<f64> {
        let state = self.state(x);
        let inj = bus_injections(self.net, &state).expect("dimension fixed by construction");
        let mut g = DVector::zeros(self.n_eq());
        for i in 0..self.nb {
            g[i] = inj.p[i] + self.loads.pd[i];
            g[self.nb + i] = inj.q[i] + self.loads.qd[i];
        }
        for k in 0..self.ng {
            let b = self.net.generator_bus(k);
            g[b] -= x[self.pg_col(k)];
            g[self.nb + b] -= x[self.qg_col(k)];
        }
        g
    }

    fn equality_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let nb = self.nb;
        let state = self.state(x);
        let full = injection_jacobian(self.net, &state).expect("dimension fixed by construction");
        let mut jac = DMatrix::zeros(self.n_eq(), self.nx);
        for r in 0..2 * nb {
            for i in 0..nb {
                if let Some(c) = self.va_col[i] {
                    jac[(r, c)] = full[(r, i)];
                }
                jac[(r, self.vm_col(i))] = full[(r, nb + i)];
            }
        }
        for k in 0..self.ng {
            let b = self.net.generator_bus(k);
            jac[(b, self.pg_col(k))] = -1.0;
            jac[(nb + b, self.qg_col(k))] = -1.0;
        }
        jac
    }

    // ---- inequalities ----

    fn local_cols(&self, me: usize, other: usize) -> [Option<usize>; 4] {
        [
            self.va_col[me],
            self.va_col[other],
            Some(self.vm_col(me)),
            Some(self.vm_col(other)),
        ]
    }

    fn branch_end(&self, state: &VoltageState, k: usize, from: bool) -> (EndPower, usize, usize) {
        let (f, t) = self.net.branch_ends(k);
        if from {
            (acpf::from_end(self.net, state, k), f, t)
        } else {
            (acpf::to_end(self.net, state, k), t, f)
        }
    }

    fn angle_diff(&self, x: &DVector<f64>, k: usize) -> f64 {
        let (f, t) = self.net.branch_ends(k);
        let a = |i: usize| self.va_col[i].map_or(0.0, |c| x[c]);
        a(f) - a(t)
    }

    fn inequalities(&self, x: &DVector<f64>) -> DVector<f64> {
        let state = self.state(x);
        let mut h = Vec::with_capacity(self.n_ineq());
        for from in [true, false] {
            for &k in &self.rated {
                let (e, _, _) = self.branch_end(&state, k, from);
                let smax = self.net.branches()[k].smax;
                h.push(e.p * e.p + e.q * e.q - smax * smax);
            }
        }
        for &k in &self.angle_upper {
            h.push(self.angle_diff(x, k) - self.net.branches()[k].theta_max);
        }
        for &k in &self.angle_lower {
            h.push(self.net.branches()[k].theta_min - self.angle_diff(x, k));
        }
        for (i, b) in self.net.buses().iter().enumerate() {
            h.push(x[self.vm_col(i)] - b.vmax);
        }
        for (i, b) in self.net.buses().iter().enumerate() {
            h.push(b.vmin - x[self.vm_col(i)]);
        }
        let gens = self.net.generators();
        for (k, g) in gens.iter().enumerate() {
            h.push(x[self.pg_col(k)] - g.pmax);
        }
        for (k, g) in gens.iter().enumerate() {
            h.push(g.pmin - x[self.pg_col(k)]);
        }
        for (k, g) in gens.iter().enumerate() {
            h.push(x[self.qg_col(k)] - g.qmax);
        }
        for (k, g) in gens.iter().enumerate() {
            h.push(g.qmin - x[self.qg_col(k)]);
        }
        DVector::from_vec(h)
    }

    fn inequality_jacobian(&self, x: &DVector<f64>) -> SparseRows {
        let state = self.state(x);
        let mut rows: SparseRows = Vec::with_capacity(self.n_ineq());
        for from in [true, false] {
            for &k in &self.rated {
                let (e, me, other) = self.branch_end(&state, k, from);
                let mut row = Vec::with_capacity(4);
                for (l, col) in self.local_cols(me, other).iter().enumerate() {
                    if let Some(c) = col {
                        row.push((*c, 2.0 * (e.p * e.dp[l] + e.q * e.dq[l])));
                    }
                }
                rows.push(row);
            }
        }
        for (sign, list) in [(1.0, &self.angle_upper), (-1.0, &self.angle_lower)] {
            for &k in list {
                let (f, t) = self.net.branch_ends(k);
                let mut row = Vec::with_capacity(2);
                if let Some(c) = self.va_col[f] {
                    row.push((c, sign));
                }
                if let Some(c) = self.va_col[t] {
                    row.push((c, -sign));
                }
                rows.push(row);
            }
        }
        for sign in [1.0, -1.0] {
            for i in 0..self.nb {
                rows.push(vec![(self.vm_col(i), sign)]);
            }
        }
        for col in [Self::pg_col as fn(&Self, usize) -> usize, Self::qg_col] {
            for sign in [1.0, -1.0] {
                for k in 0..self.ng {
                    rows.push(vec![(col(self, k), sign)]);
                }
            }
        }
        rows
    }

    // ---- second order ----

    fn scatter(&self, hess: &mut DMatrix<f64>, cols: &[Option<usize>; 4], local: &[[f64; 4]; 4]) {
        for a in 0..4 {
            let Some(ca) = cols[a] else { continue };
            for b in 0..4 {
                if let Some(cb) = cols[b] {
                    hess[(ca, cb)] += local[a][b];
                }
            }
        }
    }

    /// Hessian of `f + λᵀg + μᵀh`.
    fn lagrangian_hessian(&self, x: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
        let nb = self.nb;
        let base = self.net.base_mva();
        let state = self.state(x);
        let mut hess = DMatrix::zeros(self.nx, self.nx);
        for (k, g) in self.net.generators().iter().enumerate() {
            hess[(self.pg_col(k), self.pg_col(k))] += COST_SCALE * 2.0 * g.cost.c2 * base * base;
        }

        // power balance, split into branch-end contributions plus shunts
        for k in 0..self.net.n_branch() {
            let (f, t) = self.net.branch_ends(k);
            let y = self.net.branch_admittances(k);
            for (me, other, ys, ym) in [(f, t, y.yff, y.yft), (t, f, y.ytt, y.ytf)] {
                let (hp, hq) = EndPower::hessians(
                    state.vm[me],
                    state.vm[other],
                    state.va[me] - state.va[other],
                    ys,
                    ym,
                );
                let (wp, wq) = (lam[me], lam[nb + me]);
                let mut local = [[0.0; 4]; 4];
                for a in 0..4 {
                    for b in 0..4 {
                        local[a][b] = wp * hp[a][b] + wq * hq[a][b];
                    }
                }
                self.scatter(&mut hess, &self.local_cols(me, other), &local);
            }
        }
        for (i, b) in self.net.buses().iter().enumerate() {
            let c = self.vm_col(i);
            hess[(c, c)] += 2.0 * b.gs * lam[i] - 2.0 * b.bs * lam[nb + i];
        }

        // squared flow limits
        let mut r = 0;
        for from in [true, false] {
            for &k in &self.rated {
                let w = mu[r];
                r += 1;
                if w == 0.0 {
                    continue;
                }
                let (e, me, other) = self.branch_end(&state, k, from);
                let (f, t) = self.net.branch_ends(k);
                let y = self.net.branch_admittances(k);
                let (hp, hq) = if from {
                    EndPower::hessians(state.vm[f], state.vm[t], state.va[f] - state.va[t], y.yff, y.yft)
                } else {
                    EndPower::hessians(state.vm[t], state.vm[f], state.va[t] - state.va[f], y.ytt, y.ytf)
                };
                let mut local = [[0.0; 4]; 4];
                for a in 0..4 {
                    for b in 0..4 {
                        local[a][b] = 2.0
                            * w
                            * (e.dp[a] * e.dp[b] + e.dq[a] * e.dq[b] + e.p * hp[a][b] + e.q * hq[a][b]);
                    }
                }
                self.scatter(&mut hess, &self.local_cols(me, other), &local);
            }
        }
        hess
    }

    fn residual(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        z: &DVector<f64>,
    ) -> (KktResidual, DVector<f64>) {
        let g = self.equalities(x);
        let h = self.inequalities(x);
        let jg = self.equality_jacobian(x);
        let jh = self.inequality_jacobian(x);
        let lx = self.cost_gradient(x) + jg.tr_mul(lam) + sparse_tr_mul(&jh, mu, self.nx);
        let hmax = h.iter().fold(0.0_f64, |m, v| m.max(*v));
        let kkt = KktResidual {
            feasibility: g.amax().max(hmax),
            stationarity: lx.amax() / (1.0 + lam.amax().max(mu.amax())),
            complementarity: z.dot(mu) / (1.0 + x.amax()),
        };
        (kkt, lx)
    }
}

type SparseRows = Vec<Vec<(usize, f64)>>;

fn sparse_mul(rows: &SparseRows, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|r| r.iter().map(|&(c, v)| v * x[c]).sum::<f64>()))
}

fn sparse_tr_mul(rows: &SparseRows, y: &DVector<f64>, ncols: usize) -> DVector<f64> {
    let mut out = DVector::zeros(ncols);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            out[c] += v * y[r];
        }
    }
    out
}

type KktLu = faer::sparse::linalg::solvers::Lu<usize, f64>;

fn factor_kkt(m: &DMatrix<f64>, jg: &DMatrix<f64>) -> Option<KktLu> {
    let nx = m.nrows();
    let n = nx + jg.nrows();
    let mut entries = Vec::new();
    for j in 0..nx {
        for i in 0..nx {
            let v = m[(i, j)];
            if v != 0.0 {
                entries.push(Triplet::new(i, j, v));
            }
        }
        for i in 0..jg.nrows() {
            let v = jg[(i, j)];
            if v != 0.0 {
                entries.push(Triplet::new(nx + i, j, v));
                entries.push(Triplet::new(j, nx + i, v));
            }
        }
    }
    let matrix = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &entries).ok()?;
    matrix.sp_lu().ok()
}

fn solve_kkt(lu: &KktLu, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let mut col = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    lu.solve_in_place(col.as_mut());
    Some(DVector::from_fn(rhs.len(), |i, _| col[(i, 0)]))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Loads exceeding total capacity cannot be served by a passive network.
fn capacity_shortfall(net: &Network, loads: &Loads) -> bool {
    let passive = net.branches().iter().all(|b| b.r >= 0.0) && net.buses().iter().all(|b| b.gs >= 0.0);
    let demand: f64 = loads.pd.iter().sum();
    let capacity: f64 = net.generators().iter().map(|g| g.pmax).sum();
    passive && demand > capacity
}

/// Solves AC-OPF for the given bus loads.
pub fn solve_opf(net: &Network, loads: &Loads, config: &SolverConfig) -> OpfSolution {
    let clock = Stopwatch::start();
    let problem = OpfProblem::new(net, loads);
    let neq = problem.n_eq();
    let niq = problem.n_ineq();
    let nx = problem.nx;

    let mut x = problem.initial_point();
    let mut lam = DVector::zeros(neq);
    let mut z = DVector::from_element(niq, 1.0);
    let mut mu = DVector::from_element(niq, 1.0);
    let mut gamma = config.initial_mu;
    {
        let h = problem.inequalities(&x);
        for k in 0..niq {
            if h[k] < -1.0 {
                z[k] = -h[k];
            }
            if gamma / z[k] > 1.0 {
                mu[k] = gamma / z[k];
            }
        }
    }

    let finish = |x: &DVector<f64>,
                  lam: DVector<f64>,
                  mu: DVector<f64>,
                  z: DVector<f64>,
                  kkt: KktResidual,
                  status: OpfStatus,
                  iterations: usize| {
        let (pg, qg) = problem.dispatch(x);
        OpfSolution {
            state: problem.state(x),
            objective: objective_cost(net, &pg).unwrap_or(f64::NAN),
            pg,
            qg,
            status,
            solve_time: clock.seconds(),
            iterations,
            kkt,
            duals: OpfDuals {
                lam: lam.as_slice().to_vec(),
                mu: mu.as_slice().to_vec(),
                z: z.as_slice().to_vec(),
            },
        }
    };

    if capacity_shortfall(net, loads) {
        let (kkt, _) = problem.residual(&x, &lam, &mu, &z);
        return finish(&x, lam, mu, z, kkt, OpfStatus::Infeasible, 0);
    }

    let mut f_prev = problem.cost(&x);
    let mut iterations = 0;
    loop {
        let (kkt, lx) = problem.residual(&x, &lam, &mu, &z);
        let f = problem.cost(&x);
        let cost_change = (f - f_prev).abs() / (1.0 + f_prev.abs());
        if iterations > 0 && kkt.max() <= config.tol && cost_change <= config.tol {
            return finish(&x, lam, mu, z, kkt, OpfStatus::Converged, iterations);
        }
        if iterations >= config.max_iter {
            return finish(&x, lam, mu, z, kkt, OpfStatus::MaxIter, iterations);
        }
        f_prev = f;
        iterations += 1;

        let g = problem.equalities(&x);
        let h = problem.inequalities(&x);
        let jg = problem.equality_jacobian(&x);
        let jh = problem.inequality_jacobian(&x);
        let lxx = problem.lagrangian_hessian(&x, &lam, &mu);

        let mut m = lxx;
        for (k, row) in jh.iter().enumerate() {
            let w = mu[k] / z[k];
            for &(a, va) in row {
                for &(b, vb) in row {
                    m[(a, b)] += w * va * vb;
                }
            }
        }
        let lu = factor_kkt(&m, &jg);

        // one retry with a smaller barrier weight if the step is unusable
        let mut attempt = 0;
        let accepted = loop {
            let w = DVector::from_fn(niq, |k, _| (mu[k] * h[k] + gamma) / z[k]);
            let n_vec = &lx + sparse_tr_mul(&jh, &w, nx);
            let mut rhs = DVector::zeros(nx + neq);
            rhs.rows_mut(0, nx).copy_from(&(-n_vec));
            rhs.rows_mut(nx, neq).copy_from(&(-&g));
            let step = lu.as_ref().and_then(|lu| solve_kkt(lu, &rhs)).filter(all_finite);
            let candidate = step.and_then(|step| {
                let dx = step.rows(0, nx).into_owned();
                let dlam = step.rows(nx, neq).into_owned();
                let dz = -&h - &z - sparse_mul(&jh, &dx);
                let dmu = DVector::from_fn(niq, |k, _| -mu[k] + (gamma - mu[k] * dz[k]) / z[k]);
                let ratio = |v: &DVector<f64>, dv: &DVector<f64>| {
                    v.iter()
                        .zip(dv.iter())
                        .filter(|(_, d)| **d < 0.0)
                        .map(|(v, d)| -v / d)
                        .fold(f64::INFINITY, f64::min)
                };
                let mut alpha_p = (XI * ratio(&z, &dz)).min(1.0);
                let mut alpha_d = (XI * ratio(&mu, &dmu)).min(1.0);
                for _ in 0..20 {
                    let x_new = &x + &dx * alpha_p;
                    let ok = all_finite(&problem.equalities(&x_new))
                        && all_finite(&problem.inequalities(&x_new))
                        && problem.cost(&x_new).is_finite();
                    if ok {
                        return Some((
                            x_new,
                            &z + &dz * alpha_p,
                            &lam + &dlam * alpha_d,
                            &mu + &dmu * alpha_d,
                        ));
                    }
                    alpha_p *= config.step_reduction;
                    alpha_d *= config.step_reduction;
                }
                None
            });
            match candidate {
                Some(c) => break Some(c),
                None if attempt == 0 => {
                    attempt += 1;
                    gamma /= 10.0;
                }
                None => break None,
            }
        };
        let Some((x_new, z_new, lam_new, mu_new)) = accepted else {
            return finish(&x, lam, mu, z, kkt, OpfStatus::Infeasible, iterations);
        };
        x = x_new;
        z = z_new;
        lam = lam_new;
        mu = mu_new;
        gamma = SIGMA * z.dot(&mu) / niq.max(1) as f64;
        if x.amax() > 1e6 {
            let (kkt, _) = problem.residual(&x, &lam, &mu, &z);
            return finish(&x, lam, mu, z, kkt, OpfStatus::Infeasible, iterations);
        }
    }
}

/// Re-evaluates the KKT measures of a candidate point with the given duals.
pub fn kkt_residual(
    net: &Network,
    loads: &Loads,
    state: &VoltageState,
    pg: &[f64],
    qg: &[f64],
    duals: &OpfDuals,
) -> KktResidual {
    let problem = OpfProblem::new(net, loads);
    let mut state = state.clone();
    state.rezero(net.reference_bus());
    let x = problem.pack(&state, pg, qg);
    let (kkt, _) = problem.residual(
        &x,
        &DVector::from_column_slice(&duals.lam),
        &DVector::from_column_slice(&duals.mu),
        &DVector::from_column_slice(&duals.z),
    );
    kkt
}

/// Largest violation of the operating limits (generator boxes, voltage box,
/// branch ratings at both ends, angle differences) at a solution.
pub fn max_limit_violation(net: &Network, sol: &OpfSolution) -> f64 {
    let mut worst = 0.0_f64;
    let mut check = |v: f64, lo: f64, hi: f64| worst = worst.max(lo - v).max(v - hi);
    for (k, g) in net.generators().iter().enumerate() {
        check(sol.pg[k], g.pmin, g.pmax);
        check(sol.qg[k], g.qmin, g.qmax);
    }
    for (i, b) in net.buses().iter().enumerate() {
        check(sol.state.vm[i], b.vmin, b.vmax);
    }
    let flows = acpf::branch_flows(net, &sol.state).expect("solution matches network");
    for (k, br) in net.branches().iter().enumerate() {
        if br.smax > 0.0 {
            check(flows.s_from[k], f64::NEG_INFINITY, br.smax);
            check(flows.s_to[k], f64::NEG_INFINITY, br.smax);
        }
        let (f, t) = net.branch_ends(k);
        check(sol.state.va[f] - sol.state.va[t], br.theta_min, br.theta_max);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::netmodel::parse_case;

    fn case(name: &str) -> Network {
        parse_case(cases::bundled(name).unwrap()).unwrap()
    }

    fn balance_residual(net: &Network, loads: &Loads, sol: &OpfSolution) -> f64 {
        let inj = bus_injections(net, &sol.state).unwrap();
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

    #[test]
    fn lagrangian_hessian_matches_gradient_differences() {
        let net = case("case14");
        let loads = net.default_loads();
        let problem = OpfProblem::new(&net, &loads);
        let mut x = problem.initial_point();
        for i in 0..x.len() {
            x[i] += 0.01 * ((i * 7919) % 13) as f64 / 13.0;
        }
        let lam = DVector::from_fn(problem.n_eq(), |i, _| ((i * 31) % 7) as f64 / 7.0 - 0.4);
        let mu = DVector::from_fn(problem.n_ineq(), |i, _| ((i * 17) % 5) as f64 / 5.0);
        let z = DVector::from_element(problem.n_ineq(), 1.0);
        let hess = problem.lagrangian_hessian(&x, &lam, &mu);
        let step = 1e-6;
        for c in 0..problem.nx {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += step;
            xm[c] -= step;
            let (_, gp) = problem.residual(&xp, &lam, &mu, &z);
            let (_, gm) = problem.residual(&xm, &lam, &mu, &z);
            for r in 0..problem.nx {
                let fd = (gp[r] - gm[r]) / (2.0 * step);
                assert!(
                    (fd - hess[(r, c)]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "H[{r},{c}] analytic {} vs fd {fd}",
                    hess[(r, c)]
                );
            }
        }
    }

    #[test]
    fn flat_lossless_power_flow_needs_no_iteration() {
        let net = crate::acpf::tests::two_bus();
        let loads = net.default_loads();
        let res = solve_power_flow(&net, &loads, &[], &[1.0, 1.0], &VoltageState::flat(2)).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.state, VoltageState::flat(2));
    }

    #[test]
    fn two_bus_power_flow_recovers_angle() {
        let mut net = crate::acpf::tests::two_bus();
        let mut buses = net.buses().to_vec();
        buses[1].pd = 0.998_334_166_468_281_5;
        net = Network::from_parts(100.0, buses, net.branches().to_vec(), vec![]).unwrap();
        let res = solve_power_flow(
            &net,
            &net.default_loads(),
            &[],
            &[1.0, 1.0],
            &VoltageState::flat(2),
        )
        .unwrap();
        // with q2 = 0: vm2 = cos θ and vm2·sin θ = p/10, so sin 2θ = 2p/10
        let theta = 0.5 * (2.0 * 0.099_833_416_646_828_15_f64).asin();
        assert!((res.state.va[1] + theta).abs() < 1e-8);
        assert!((res.state.vm[1] - theta.cos()).abs() < 1e-8);
        assert!((res.state.va[1] + 0.1).abs() < 1e-2);
    }

    #[test]
    fn case14_opf_converges_with_small_kkt_residual() {
        let net = case("case14");
        let loads = net.default_loads();
        let sol = solve_opf(&net, &loads, &SolverConfig::default());
        assert_eq!(sol.status, OpfStatus::Converged, "{sol:?}");
        assert!(sol.kkt.max() <= 1e-6);
        assert!(max_limit_violation(&net, &sol) <= 1e-6);
        assert!(balance_residual(&net, &loads, &sol) <= 1e-6);
        assert!(sol.solve_time > 0.0);
    }

    #[test]
    fn overloaded_case_is_not_reported_converged() {
        let net = case("case14");
        let capacity: f64 = net.generators().iter().map(|g| g.pmax).sum();
        let demand: f64 = net.default_loads().pd.iter().sum();
        let loads = net.default_loads().scaled(1.05 * capacity / demand);
        let sol = solve_opf(&net, &loads, &SolverConfig::default());
        assert!(matches!(sol.status, OpfStatus::Infeasible | OpfStatus::MaxIter));
    }

    #[test]
    fn angle_perturbation_raises_kkt_residual() {
        let net = case("case14");
        let loads = net.default_loads();
        let sol = solve_opf(&net, &loads, &SolverConfig::default());
        let base = kkt_residual(&net, &loads, &sol.state, &sol.pg, &sol.qg, &sol.duals);
        let mut moved = sol.state.clone();
        moved.va[3] += 1e-3;
        let bumped = kkt_residual(&net, &loads, &moved, &sol.pg, &sol.qg, &sol.duals);
        assert!(bumped.max() > base.max());
    }

    #[test]
    fn opf_is_deterministic() {
        let net = case("case14");
        let loads = net.default_loads().scaled(1.03);
        let a = solve_opf(&net, &loads, &SolverConfig::default());
        let b = solve_opf(&net, &loads, &SolverConfig::default());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.pg, b.pg);
        assert_eq!(a.state, b.state);
        assert_eq!(a.duals, b.duals);
    }

    #[test]
    fn power_flow_round_trip_recovers_opf_state() {
        let net = case("case14");
        let loads = net.default_loads();
        let cfg = SolverConfig {
            tol: 1e-9,
            ..SolverConfig::default()
        };
        let sol = solve_opf(&net, &loads, &cfg);
        assert!(sol.converged());
        let pf = solve_power_flow(
            &net,
            &loads,
            &sol.pg,
            &sol.state.vm,
            &VoltageState::flat(net.n_bus()),
        )
        .unwrap();
        for i in 0..net.n_bus() {
            assert!((pf.state.vm[i] - sol.state.vm[i]).abs() < 1e-6);
            assert!((pf.state.va[i] - sol.state.va[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            step_reduction: 1.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
