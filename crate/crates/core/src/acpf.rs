//! Power-flow algebra in polar coordinates.
//!
//! Column convention for every Jacobian here: all bus angles first, then all
//! bus magnitudes (`2·n_bus` columns). Callers that fix the reference angle
//! drop its column themselves.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::Network;

#[derive(Debug, Error, PartialEq)]
pub enum AcpfError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

fn check_len(expected: usize, got: usize) -> Result<(), AcpfError> {
    if expected == got {
        Ok(())
    } else {
        Err(AcpfError::Dimension { expected, got })
    }
}

/// Flow magnitudes below this are treated as zero when differentiating `s`.
pub const FLOW_SINGULARITY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl VoltageState {
    pub fn flat(n: usize) -> Self {
        VoltageState {
            vm: vec![1.0; n],
            va: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vm.is_empty()
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    /// Shifts all angles so that bus `reference` sits at zero.
    pub fn rezero(&mut self, reference: usize) {
        let shift = self.va[reference];
        for a in &mut self.va {
            *a -= shift;
        }
    }

    /// Elementwise mean of a nonempty list of states.
    pub fn mean<'a>(states: impl IntoIterator<Item = &'a VoltageState>) -> Option<VoltageState> {
        let mut it = states.into_iter();
        let first = it.next()?;
        let mut acc = first.clone();
        let mut count = 1.0;
        for s in it {
            for (a, b) in acc.vm.iter_mut().zip(&s.vm) {
                *a += b;
            }
            for (a, b) in acc.va.iter_mut().zip(&s.va) {
                *a += b;
            }
            count += 1.0;
        }
        if count > 1.0 {
            acc.vm.iter_mut().for_each(|v| *v /= count);
            acc.va.iter_mut().for_each(|v| *v /= count);
        }
        Some(acc)
    }

    fn check(&self, net: &Network) -> Result<(), AcpfError> {
        check_len(net.n_bus(), self.vm.len())?;
        check_len(net.n_bus(), self.va.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub p_from: Vec<f64>,
    pub q_from: Vec<f64>,
    pub p_to: Vec<f64>,
    pub q_to: Vec<f64>,
    pub s_from: Vec<f64>,
    pub s_to: Vec<f64>,
}

/// `p_i = Σ_j V_i V_j (G_ij cos θ_ij + B_ij sin θ_ij)` and the matching
/// reactive sum, over the nonzeros of Ybus.
pub fn bus_injections(net: &Network, state: &VoltageState) -> Result<Injection, AcpfError> {
    state.check(net)?;
    let n = net.n_bus();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let vi = state.vm[i];
        let (mut pi, mut qi) = (0.0, 0.0);
        for &(j, y) in net.ybus_row(i) {
            let th = state.va[i] - state.va[j];
            let (s, c) = th.sin_cos();
            let vv = vi * state.vm[j];
            pi += vv * (y.re * c + y.im * s);
            qi += vv * (y.re * s - y.im * c);
        }
        p[i] = pi;
        q[i] = qi;
    }
    Ok(Injection { p, q })
}

/// Complex power at one branch end with its local derivatives.
///
/// Local variable order is `[θ_self, θ_other, V_self, V_other]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EndPower {
    pub p: f64,
    pub q: f64,
    pub dp: [f64; 4],
    pub dq: [f64; 4],
}

impl EndPower {
    /// `S = V_s·conj(y_self·V_s + y_mut·V_o)`.
    pub fn eval(vs: f64, vo: f64, theta: f64, y_self: Complex64, y_mut: Complex64) -> EndPower {
        let (s, c) = theta.sin_cos();
        let (gm, bm) = (y_mut.re, y_mut.im);
        let a = gm * c + bm * s;
        let da = -gm * s + bm * c;
        let b = gm * s - bm * c;
        let db = gm * c + bm * s;
        let vv = vs * vo;
        EndPower {
            p: vs * vs * y_self.re + vv * a,
            q: -vs * vs * y_self.im + vv * b,
            dp: [vv * da, -vv * da, 2.0 * vs * y_self.re + vo * a, vs * a],
            dq: [vv * db, -vv * db, -2.0 * vs * y_self.im + vo * b, vs * b],
        }
    }

    /// Second derivatives of `p` and `q` in the local variable order.
    pub fn hessians(
        vs: f64,
        vo: f64,
        theta: f64,
        y_self: Complex64,
        y_mut: Complex64,
    ) -> ([[f64; 4]; 4], [[f64; 4]; 4]) {
        let (s, c) = theta.sin_cos();
        let (gm, bm) = (y_mut.re, y_mut.im);
        let build = |f: f64, df: f64, self_vv: f64| {
            let vv = vs * vo;
            let ddf = -f;
            let mut h = [[0.0; 4]; 4];
            h[0][0] = vv * ddf;
            h[0][1] = -vv * ddf;
            h[1][1] = vv * ddf;
            h[0][2] = vo * df;
            h[0][3] = vs * df;
            h[1][2] = -vo * df;
            h[1][3] = -vs * df;
            h[2][2] = self_vv;
            h[2][3] = f;
            h[3][3] = 0.0;
            for r in 0..4 {
                for k in 0..r {
                    h[r][k] = h[k][r];
                }
            }
            h
        };
        let a = gm * c + bm * s;
        let da = -gm * s + bm * c;
        let b = gm * s - bm * c;
        let db = gm * c + bm * s;
        (
            build(a, da, 2.0 * y_self.re),
            build(b, db, -2.0 * y_self.im),
        )
    }
}

pub(crate) fn from_end(net: &Network, state: &VoltageState, k: usize) -> EndPower {
    let (f, t) = net.branch_ends(k);
    let y = net.branch_admittances(k);
    EndPower::eval(state.vm[f], state.vm[t], state.va[f] - state.va[t], y.yff, y.yft)
}

pub(crate) fn to_end(net: &Network, state: &VoltageState, k: usize) -> EndPower {
    let (f, t) = net.branch_ends(k);
    let y = net.branch_admittances(k);
    EndPower::eval(state.vm[t], state.vm[f], state.va[t] - state.va[f], y.ytt, y.ytf)
}

pub fn branch_flows(net: &Network, state: &VoltageState) -> Result<BranchFlow, AcpfError> {
    state.check(net)?;
    let nl = net.n_branch();
    let mut out = BranchFlow {
        p_from: Vec::with_capacity(nl),
        q_from: Vec::with_capacity(nl),
        p_to: Vec::with_capacity(nl),
        q_to: Vec::with_capacity(nl),
        s_from: Vec::with_capacity(nl),
        s_to: Vec::with_capacity(nl),
    };
    for k in 0..nl {
        let f = from_end(net, state, k);
        let t = to_end(net, state, k);
        out.p_from.push(f.p);
        out.q_from.push(f.q);
        out.p_to.push(t.p);
        out.q_to.push(t.q);
        out.s_from.push(f.p.hypot(f.q));
        out.s_to.push(t.p.hypot(t.q));
    }
    Ok(out)
}

/// Total generation cost in $/h for per-generator dispatch in p.u.
pub fn objective_cost(net: &Network, pg: &[f64]) -> Result<f64, AcpfError> {
    check_len(net.n_gen(), pg.len())?;
    let base = net.base_mva();
    Ok(net
        .generators()
        .iter()
        .zip(pg)
        .map(|(g, &p)| {
            let mw = p * base;
            g.cost.c2 * mw * mw + g.cost.c1 * mw + g.cost.c0
        })
        .sum())
}

/// `∂(p, q)/∂(va, vm)`: rows `p_0..p_n, q_0..q_n`, columns `va` then `vm`.
pub fn injection_jacobian(net: &Network, state: &VoltageState) -> Result<DMatrix<f64>, AcpfError> {
    let inj = bus_injections(net, state)?;
    let n = net.n_bus();
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let vi = state.vm[i];
        for &(j, y) in net.ybus_row(i) {
            if i == j {
                continue;
            }
            let (g, b) = (y.re, y.im);
            let (s, c) = (state.va[i] - state.va[j]).sin_cos();
            let vj = state.vm[j];
            jac[(i, j)] = vi * vj * (g * s - b * c);
            jac[(i, n + j)] = vi * (g * c + b * s);
            jac[(n + i, j)] = -vi * vj * (g * c + b * s);
            jac[(n + i, n + j)] = vi * (g * s - b * c);
        }
        let yii = net.ybus()[(i, i)];
        let (gii, bii) = (yii.re, yii.im);
        jac[(i, i)] = -inj.q[i] - bii * vi * vi;
        jac[(i, n + i)] = inj.p[i] / vi + gii * vi;
        jac[(n + i, i)] = inj.p[i] - gii * vi * vi;
        jac[(n + i, n + i)] = inj.q[i] / vi - bii * vi;
    }
    Ok(jac)
}

/// Jacobian of branch apparent-power magnitudes.
#[derive(Debug, Clone)]
pub struct FlowJacobian {
    /// Rows `s_from` for every branch, then `s_to` for every branch.
    pub matrix: DMatrix<f64>,
    /// Rows left as zeros because the flow magnitude sits below
    /// [`FLOW_SINGULARITY`].
    pub singular: Vec<bool>,
}

pub fn flow_jacobian(net: &Network, state: &VoltageState) -> Result<FlowJacobian, AcpfError> {
    state.check(net)?;
    let n = net.n_bus();
    let nl = net.n_branch();
    let mut matrix = DMatrix::zeros(2 * nl, 2 * n);
    let mut singular = vec![false; 2 * nl];
    for k in 0..nl {
        let (f, t) = net.branch_ends(k);
        for (row, end, me, other) in [
            (k, from_end(net, state, k), f, t),
            (nl + k, to_end(net, state, k), t, f),
        ] {
            let mag = end.p.hypot(end.q);
            if mag < FLOW_SINGULARITY {
                singular[row] = true;
                continue;
            }
            let cols = [me, other, n + me, n + other];
            for (l, &col) in cols.iter().enumerate() {
                matrix[(row, col)] += (end.p * end.dp[l] + end.q * end.dq[l]) / mag;
            }
        }
    }
    Ok(FlowJacobian { matrix, singular })
}
