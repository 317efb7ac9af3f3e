//! Independent reference computations shared by the integration tests.
//!
//! Everything here works in complex rectangular form straight from the raw
//! branch data, never through the crate's admittance matrix or polar sums.
#![allow(dead_code)]

use gridvolt::{parse_case, Network, VoltageState};
use num_complex::Complex64;
use rand::Rng;

pub fn case(name: &str) -> Network {
    parse_case(gridvolt::cases::bundled(name).expect("bundled case")).expect("case parses")
}

pub const CASES: [&str; 3] = ["case14", "case30", "case118"];

/// Π-model terminal admittances `(yff, yft, ytf, ytt)` from r, x, b and the
/// complex tap `t·e^{jφ}`.
pub fn pi_model(net: &Network, k: usize) -> [Complex64; 4] {
    let br = &net.branches()[k];
    let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let half = Complex64::new(0.0, br.b_ch / 2.0);
    let t = Complex64::from_polar(br.tap, br.shift);
    [
        (ys + half) / (t * t.conj()),
        -ys / t.conj(),
        -ys / t,
        ys + half,
    ]
}

pub fn reference_ybus(net: &Network) -> Vec<Vec<Complex64>> {
    let n = net.n_bus();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for k in 0..net.n_branch() {
        let (f, t) = net.branch_ends(k);
        let [yff, yft, ytf, ytt] = pi_model(net, k);
        y[f][f] += yff;
        y[f][t] += yft;
        y[t][f] += ytf;
        y[t][t] += ytt;
    }
    for (i, b) in net.buses().iter().enumerate() {
        y[i][i] += Complex64::new(b.gs, b.bs);
    }
    y
}

pub fn phasors(state: &VoltageState) -> Vec<Complex64> {
    state
        .vm
        .iter()
        .zip(&state.va)
        .map(|(m, a)| Complex64::from_polar(*m, *a))
        .collect()
}

/// `diag(V)·conj(Ybus·V)`.
pub fn complex_injections(ybus: &[Vec<Complex64>], state: &VoltageState) -> Vec<Complex64> {
    let v = phasors(state);
    ybus.iter()
        .zip(&v)
        .map(|(row, vi)| {
            let i: Complex64 = row.iter().zip(&v).map(|(y, vj)| y * vj).sum();
            vi * i.conj()
        })
        .collect()
}

/// Complex power entering each branch at its from and to ends.
pub fn complex_flows(net: &Network, state: &VoltageState) -> Vec<(Complex64, Complex64)> {
    let v = phasors(state);
    (0..net.n_branch())
        .map(|k| {
            let (f, t) = net.branch_ends(k);
            let [yff, yft, ytf, ytt] = pi_model(net, k);
            let i_f = yff * v[f] + yft * v[t];
            let i_t = ytf * v[f] + ytt * v[t];
            (v[f] * i_f.conj(), v[t] * i_t.conj())
        })
        .collect()
}

/// Magnitudes in [0.85, 1.15] and angles in [-0.6, 0.6] rad, reference at 0.
pub fn random_state(net: &Network, rng: &mut impl Rng) -> VoltageState {
    let n = net.n_bus();
    let mut st = VoltageState {
        vm: (0..n).map(|_| rng.gen_range(0.85..1.15)).collect(),
        va: (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect(),
    };
    st.va[net.reference_bus()] = 0.0;
    st
}

/// Central differences of `f` with respect to `[va, vm]`.
pub fn central_jacobian(state: &VoltageState, h: f64, f: impl Fn(&VoltageState) -> Vec<f64>) -> Vec<Vec<f64>> {
    let n = state.vm.len();
    let mut cols = Vec::with_capacity(2 * n);
    for c in 0..2 * n {
        let mut plus = state.clone();
        let mut minus = state.clone();
        if c < n {
            plus.va[c] += h;
            minus.va[c] -= h;
        } else {
            plus.vm[c - n] += h;
            minus.vm[c - n] -= h;
        }
        let (fp, fm) = (f(&plus), f(&minus));
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    cols
}
