//! Grid case parsing, per-unit conversion and bus admittance assembly.
//!
//! Two input formats are accepted: MATPOWER case text (`mpc.baseMVA`,
//! `mpc.bus`, `mpc.gen`, `mpc.branch`, `mpc.gencost`) and a JSON mirror whose
//! field names follow [`Bus`], [`Branch`] and [`Generator`]. Everything is held
//! in per-unit on `base_mva` with angles in radians once parsed.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("parse error in table `{table}` row {row}: {message}")]
    Table {
        table: String,
        row: usize,
        message: String,
    },
    #[error("parse error: {0}")]
    Syntax(String),
    #[error("validation error: {0}")]
    Validation(Diagnostic),
    #[error("branch {index} ({from} -> {to}) has zero series impedance")]
    ZeroImpedance { index: usize, from: u32, to: u32 },
    #[error("branch {index} references unknown bus {bus}")]
    UnknownBus { index: usize, bus: u32 },
    #[error("generator {index} references unknown bus {bus}")]
    UnknownGeneratorBus { index: usize, bus: u32 },
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vmin: f64,
    pub vmax: f64,
    pub is_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub b_ch: f64,
    /// Off-nominal turns ratio, 1.0 for plain lines.
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
    /// Apparent power rating; 0 means unlimited.
    pub smax: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

/// Polynomial cost `c2·P² + c1·P + c0` with `P` in MW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub cost: CostCurve,
}

/// Per-bus active and reactive demand in p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loads {
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
}

impl Loads {
    pub fn len(&self) -> usize {
        self.pd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pd.is_empty()
    }

    pub fn has_load(&self, bus: usize) -> bool {
        self.pd[bus] != 0.0 || self.qd[bus] != 0.0
    }

    /// Multiplies every bus demand by `factor`.
    pub fn scaled(&self, factor: f64) -> Loads {
        Loads {
            pd: self.pd.iter().map(|p| p * factor).collect(),
            qd: self.qd.iter().map(|q| q * factor).collect(),
        }
    }
}

/// Complex Π-model admittances of one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

/// Validated, immutable grid model.
#[derive(Debug, Clone)]
pub struct Network {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    generators: Vec<Generator>,
    ybus: DMatrix<Complex64>,
    // derived
    bus_pos: HashMap<u32, usize>,
    branch_ends: Vec<(usize, usize)>,
    branch_y: Vec<BranchAdmittance>,
    gen_bus: Vec<usize>,
    gens_at_bus: Vec<Vec<usize>>,
    ybus_rows: Vec<Vec<(usize, Complex64)>>,
    reference: Option<usize>,
}

impl Network {
    /// Assembles a network from per-unit records and builds its admittance
    /// matrix. No invariant checks beyond what Ybus assembly needs; see
    /// [`validate_network`] for the rest.
    pub fn from_parts(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
    ) -> Result<Network, CaseError> {
        let mut bus_pos = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if bus_pos.insert(b.id, i).is_some() {
                return Err(CaseError::DuplicateBus(b.id));
            }
        }
        let mut branch_ends = Vec::with_capacity(branches.len());
        for (k, br) in branches.iter().enumerate() {
            let f = *bus_pos
                .get(&br.from)
                .ok_or(CaseError::UnknownBus { index: k, bus: br.from })?;
            let t = *bus_pos
                .get(&br.to)
                .ok_or(CaseError::UnknownBus { index: k, bus: br.to })?;
            branch_ends.push((f, t));
        }
        let mut gen_bus = Vec::with_capacity(generators.len());
        let mut gens_at_bus = vec![Vec::new(); buses.len()];
        for (k, g) in generators.iter().enumerate() {
            let b = *bus_pos
                .get(&g.bus)
                .ok_or(CaseError::UnknownGeneratorBus { index: k, bus: g.bus })?;
            gen_bus.push(b);
            gens_at_bus[b].push(k);
        }
        let branch_y = branches
            .iter()
            .enumerate()
            .map(|(k, br)| branch_admittance(k, br))
            .collect::<Result<Vec<_>, _>>()?;
        let ybus = assemble_ybus(&buses, &branch_ends, &branch_y);
        let ybus_rows = (0..buses.len())
            .map(|i| {
                (0..buses.len())
                    .filter_map(|j| {
                        let y = ybus[(i, j)];
                        (y != Complex64::new(0.0, 0.0)).then_some((j, y))
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_reference)
            .map(|(i, _)| i)
            .collect();
        let reference = (refs.len() == 1).then(|| refs[0]);
        Ok(Network {
            base_mva,
            buses,
            branches,
            generators,
            ybus,
            bus_pos,
            branch_ends,
            branch_y,
            gen_bus,
            gens_at_bus,
            ybus_rows,
            reference,
        })
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn ybus(&self) -> &DMatrix<Complex64> {
        &self.ybus
    }

    /// Nonzero entries of Ybus row `i` as `(column, value)`.
    pub fn ybus_row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.ybus_rows[i]
    }

    /// Position of the reference bus. Panics on networks that failed the
    /// single-reference check; [`parse_case`] never returns those.
    pub fn reference_bus(&self) -> usize {
        self.reference
            .expect("network has no unique reference bus")
    }

    pub fn try_reference_bus(&self) -> Option<usize> {
        self.reference
    }

    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.bus_pos.get(&id).copied()
    }

    /// Internal (from, to) bus positions of branch `k`.
    pub fn branch_ends(&self, k: usize) -> (usize, usize) {
        self.branch_ends[k]
    }

    pub fn branch_admittances(&self, k: usize) -> &BranchAdmittance {
        &self.branch_y[k]
    }

    /// Bus position of generator `k`.
    pub fn generator_bus(&self, k: usize) -> usize {
        self.gen_bus[k]
    }

    pub fn generators_at(&self, bus: usize) -> &[usize] {
        &self.gens_at_bus[bus]
    }

    pub fn has_generator(&self, bus: usize) -> bool {
        !self.gens_at_bus[bus].is_empty()
    }

    pub fn default_loads(&self) -> Loads {
        Loads {
            pd: self.buses.iter().map(|b| b.pd).collect(),
            qd: self.buses.iter().map(|b| b.qd).collect(),
        }
    }

    pub fn bus_ids(&self) -> Vec<u32> {
        self.buses.iter().map(|b| b.id).collect()
    }

    /// Content hash of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let text = self.to_json().expect("network always serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// JSON mirror: angles in degrees, everything else per-unit.
    pub fn to_json(&self) -> Result<String, CaseError> {
        let file = CaseFile {
            base_mva: self.base_mva,
            buses: self.buses.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    shift: degrees_exact(b.shift),
                    theta_min: degrees_exact(b.theta_min),
                    theta_max: degrees_exact(b.theta_max),
                    ..b.clone()
                })
                .collect(),
            generators: self.generators.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.base_mva == other.base_mva
            && self.buses == other.buses
            && self.branches == other.branches
            && self.generators == other.generators
    }
}

/// Degree value whose `to_radians` reproduces `rad` bit for bit, when one
/// exists within a few ulps of the direct conversion.
fn degrees_exact(rad: f64) -> f64 {
    let d = rad.to_degrees();
    if !d.is_finite() || d.to_radians() == rad {
        return d;
    }
    let mut lo = d;
    let mut hi = d;
    for _ in 0..4 {
        lo = f64::from_bits(if lo > 0.0 { lo.to_bits() - 1 } else { lo.to_bits() + 1 });
        hi = f64::from_bits(if hi > 0.0 { hi.to_bits() + 1 } else { hi.to_bits() - 1 });
        if lo.to_radians() == rad {
            return lo;
        }
        if hi.to_radians() == rad {
            return hi;
        }
    }
    d
}

#[derive(Serialize, Deserialize)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    generators: Vec<Generator>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    NoReferenceBus,
    MultipleReferenceBuses(Vec<u32>),
    IsolatedBus(u32),
    Disconnected { island_sizes: Vec<usize> },
    VoltageBounds { bus: u32, vmin: f64, vmax: f64 },
    ZeroImpedance { branch: usize },
    NonPositiveTap { branch: usize, tap: f64 },
    AngleBounds { branch: usize },
    NegativeRating { branch: usize },
    ActiveBounds { generator: usize },
    ReactiveBounds { generator: usize },
    NegativeQuadraticCost { generator: usize },
}

impl Diagnostic {
    /// Whether parsing should refuse a network showing this problem.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            Diagnostic::NoReferenceBus
                | Diagnostic::MultipleReferenceBuses(_)
                | Diagnostic::IsolatedBus(_)
                | Diagnostic::Disconnected { .. }
        )
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoReferenceBus => write!(f, "no reference bus"),
            Diagnostic::MultipleReferenceBuses(ids) => {
                write!(f, "multiple reference buses: {ids:?}")
            }
            Diagnostic::IsolatedBus(id) => write!(f, "bus {id} is isolated (touches no branch)"),
            Diagnostic::Disconnected { island_sizes } => {
                write!(f, "network splits into islands of sizes {island_sizes:?}")
            }
            Diagnostic::VoltageBounds { bus, vmin, vmax } => {
                write!(f, "bus {bus} has invalid voltage bounds [{vmin}, {vmax}]")
            }
            Diagnostic::ZeroImpedance { branch } => {
                write!(f, "branch {branch} has zero series impedance")
            }
            Diagnostic::NonPositiveTap { branch, tap } => {
                write!(f, "branch {branch} has non-positive tap {tap}")
            }
            Diagnostic::AngleBounds { branch } => {
                write!(f, "branch {branch} has theta_min > theta_max")
            }
            Diagnostic::NegativeRating { branch } => write!(f, "branch {branch} has negative rating"),
            Diagnostic::ActiveBounds { generator } => {
                write!(f, "generator {generator} has pmin > pmax")
            }
            Diagnostic::ReactiveBounds { generator } => {
                write!(f, "generator {generator} has qmin > qmax")
            }
            Diagnostic::NegativeQuadraticCost { generator } => {
                write!(f, "generator {generator} has negative quadratic cost")
            }
        }
    }
}

/// Checks every record invariant plus connectivity.
pub fn validate_network(net: &Network) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let refs: Vec<u32> = net
        .buses
        .iter()
        .filter(|b| b.is_reference)
        .map(|b| b.id)
        .collect();
    match refs.len() {
        0 => out.push(Diagnostic::NoReferenceBus),
        1 => {}
        _ => out.push(Diagnostic::MultipleReferenceBuses(refs)),
    }
    for b in &net.buses {
        if !(b.vmin > 0.0 && b.vmin <= b.vmax) {
            out.push(Diagnostic::VoltageBounds {
                bus: b.id,
                vmin: b.vmin,
                vmax: b.vmax,
            });
        }
    }
    for (k, br) in net.branches.iter().enumerate() {
        if br.r == 0.0 && br.x == 0.0 {
            out.push(Diagnostic::ZeroImpedance { branch: k });
        }
        if !(br.tap > 0.0) {
            out.push(Diagnostic::NonPositiveTap { branch: k, tap: br.tap });
        }
        if br.theta_min > br.theta_max {
            out.push(Diagnostic::AngleBounds { branch: k });
        }
        if br.smax < 0.0 {
            out.push(Diagnostic::NegativeRating { branch: k });
        }
    }
    for (k, g) in net.generators.iter().enumerate() {
        if g.pmin > g.pmax {
            out.push(Diagnostic::ActiveBounds { generator: k });
        }
        if g.qmin > g.qmax {
            out.push(Diagnostic::ReactiveBounds { generator: k });
        }
        if g.cost.c2 < 0.0 {
            out.push(Diagnostic::NegativeQuadraticCost { generator: k });
        }
    }

    let n = net.n_bus();
    let mut adj = vec![Vec::new(); n];
    for &(f, t) in &net.branch_ends {
        if f != t {
            adj[f].push(t);
            adj[t].push(f);
        }
    }
    let mut isolated = false;
    for (i, a) in adj.iter().enumerate() {
        if a.is_empty() && n > 1 {
            out.push(Diagnostic::IsolatedBus(net.buses[i].id));
            isolated = true;
        }
    }
    if !isolated && n > 0 {
        let mut seen = vec![false; n];
        let mut sizes = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(u) = queue.pop_front() {
                size += 1;
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            sizes.push(size);
        }
        if sizes.len() > 1 {
            out.push(Diagnostic::Disconnected { island_sizes: sizes });
        }
    }
    out
}

fn branch_admittance(k: usize, br: &Branch) -> Result<BranchAdmittance, CaseError> {
    if br.r == 0.0 && br.x == 0.0 {
        return Err(CaseError::ZeroImpedance {
            index: k,
            from: br.from,
            to: br.to,
        });
    }
    let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let charging = Complex64::new(0.0, br.b_ch / 2.0);
    let t = br.tap;
    let ytt = ys + charging;
    Ok(BranchAdmittance {
        yff: ytt / (t * t),
        yft: -ys / (t * Complex64::from_polar(1.0, -br.shift)),
        ytf: -ys / (t * Complex64::from_polar(1.0, br.shift)),
        ytt,
    })
}

fn assemble_ybus(
    buses: &[Bus],
    ends: &[(usize, usize)],
    admittances: &[BranchAdmittance],
) -> DMatrix<Complex64> {
    let n = buses.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for (&(f, t), a) in ends.iter().zip(admittances) {
        y[(f, f)] += a.yff;
        y[(f, t)] += a.yft;
        y[(t, f)] += a.ytf;
        y[(t, t)] += a.ytt;
    }
    for (i, b) in buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(b.gs, b.bs);
    }
    y
}

/// Π-model bus admittance matrix for the given records.
pub fn build_ybus(buses: &[Bus], branches: &[Branch]) -> Result<DMatrix<Complex64>, CaseError> {
    let pos: HashMap<u32, usize> = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let mut ends = Vec::with_capacity(branches.len());
    let mut ys = Vec::with_capacity(branches.len());
    for (k, br) in branches.iter().enumerate() {
        let f = *pos
            .get(&br.from)
            .ok_or(CaseError::UnknownBus { index: k, bus: br.from })?;
        let t = *pos
            .get(&br.to)
            .ok_or(CaseError::UnknownBus { index: k, bus: br.to })?;
        ends.push((f, t));
        ys.push(branch_admittance(k, br)?);
    }
    Ok(assemble_ybus(buses, &ends, &ys))
}

/// Parses MATPOWER text or the JSON mirror, then rejects networks without a
/// unique reference bus or with isolated buses.
pub fn parse_case(source: &str) -> Result<Network, CaseError> {
    let net = if source.trim_start().starts_with('{') {
        parse_json(source)?
    } else {
        parse_matpower(source)?
    };
    if let Some(d) = validate_network(&net).into_iter().find(Diagnostic::is_fatal) {
        return Err(CaseError::Validation(d));
    }
    Ok(net)
}

fn parse_json(source: &str) -> Result<Network, CaseError> {
    let file: CaseFile = serde_json::from_str(source)?;
    let branches = file
        .branches
        .into_iter()
        .map(|b| Branch {
            shift: b.shift.to_radians(),
            theta_min: b.theta_min.to_radians(),
            theta_max: b.theta_max.to_radians(),
            ..b
        })
        .collect();
    Network::from_parts(file.base_mva, file.buses, branches, file.generators)
}

/// Raw numeric rows of one `mpc.<name> = [ ... ];` block.
fn matpower_table(text: &str, name: &str) -> Result<Option<Vec<Vec<f64>>>, CaseError> {
    let key = format!("mpc.{name}");
    let mut search = 0;
    let start = loop {
        let Some(off) = text[search..].find(&key) else {
            return Ok(None);
        };
        let at = search + off;
        let rest = &text[at + key.len()..];
        // reject prefixes such as `mpc.gen` matching `mpc.gencost`
        let next = rest.chars().next();
        if matches!(next, Some(c) if c.is_alphanumeric() || c == '_') {
            search = at + key.len();
            continue;
        }
        break at + key.len();
    };
    let rest = &text[start..];
    let open = rest
        .find('[')
        .ok_or_else(|| CaseError::Syntax(format!("table `{name}` has no opening bracket")))?;
    let close = rest[open..]
        .find(']')
        .ok_or_else(|| CaseError::Syntax(format!("table `{name}` has no closing bracket")))?;
    let body = &rest[open + 1..open + close];
    let mut rows = Vec::new();
    for chunk in body.split([';', '\n']) {
        let line = chunk.trim();
        if line.is_empty() {
            continue;
        }
        let row_no = rows.len() + 1;
        let values = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| CaseError::Table {
                    table: name.to_string(),
                    row: row_no,
                    message: format!("invalid number `{s}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    Ok(Some(rows))
}

fn strip_comments(source: &str) -> String {
    source
        .lines()
        .map(|l| match l.find('%') {
            Some(i) => &l[..i],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn require_columns(rows: &[Vec<f64>], table: &str, n: usize) -> Result<(), CaseError> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() < n {
            return Err(CaseError::Table {
                table: table.to_string(),
                row: i + 1,
                message: format!("expected at least {n} columns, found {}", r.len()),
            });
        }
    }
    Ok(())
}

fn to_id(v: f64, table: &str, row: usize) -> Result<u32, CaseError> {
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(CaseError::Table {
            table: table.to_string(),
            row,
            message: format!("invalid bus id {v}"),
        });
    }
    Ok(v as u32)
}

fn parse_matpower(source: &str) -> Result<Network, CaseError> {
    let text = strip_comments(source);
    let base_mva = {
        let key = "mpc.baseMVA";
        let at = text
            .find(key)
            .ok_or_else(|| CaseError::Syntax("missing `mpc.baseMVA`".into()))?;
        let rest = &text[at + key.len()..];
        let eq = rest
            .find('=')
            .ok_or_else(|| CaseError::Syntax("malformed `mpc.baseMVA`".into()))?;
        let end = rest[eq..].find(';').map(|e| eq + e).unwrap_or(rest.len());
        rest[eq + 1..end]
            .trim()
            .parse::<f64>()
            .map_err(|_| CaseError::Syntax("invalid `mpc.baseMVA` value".into()))?
    };
    if !(base_mva > 0.0) {
        return Err(CaseError::Syntax("`mpc.baseMVA` must be positive".into()));
    }
    let missing = |t: &str| CaseError::Syntax(format!("missing table `mpc.{t}`"));
    let bus_rows = matpower_table(&text, "bus")?.ok_or_else(|| missing("bus"))?;
    let gen_rows = matpower_table(&text, "gen")?.ok_or_else(|| missing("gen"))?;
    let branch_rows = matpower_table(&text, "branch")?.ok_or_else(|| missing("branch"))?;
    let cost_rows = matpower_table(&text, "gencost")?.ok_or_else(|| missing("gencost"))?;
    require_columns(&bus_rows, "bus", 13)?;
    require_columns(&gen_rows, "gen", 10)?;
    require_columns(&branch_rows, "branch", 13)?;
    if cost_rows.len() < gen_rows.len() {
        return Err(CaseError::Table {
            table: "gencost".into(),
            row: cost_rows.len() + 1,
            message: format!(
                "{} cost rows for {} generators",
                cost_rows.len(),
                gen_rows.len()
            ),
        });
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, r) in bus_rows.iter().enumerate() {
        buses.push(Bus {
            id: to_id(r[0], "bus", i + 1)?,
            pd: r[2] / base_mva,
            qd: r[3] / base_mva,
            gs: r[4] / base_mva,
            bs: r[5] / base_mva,
            vmax: r[11],
            vmin: r[12],
            is_reference: r[1] == 3.0,
        });
    }

    let mut generators = Vec::with_capacity(gen_rows.len());
    for (i, (r, c)) in gen_rows.iter().zip(&cost_rows).enumerate() {
        if r[7] <= 0.0 {
            continue;
        }
        let cost = parse_cost(c, i + 1)?;
        generators.push(Generator {
            bus: to_id(r[0], "gen", i + 1)?,
            qmax: r[3] / base_mva,
            qmin: r[4] / base_mva,
            pmax: r[8] / base_mva,
            pmin: r[9] / base_mva,
            cost,
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (i, r) in branch_rows.iter().enumerate() {
        if r[10] <= 0.0 {
            continue;
        }
        branches.push(Branch {
            from: to_id(r[0], "branch", i + 1)?,
            to: to_id(r[1], "branch", i + 1)?,
            r: r[2],
            x: r[3],
            b_ch: r[4],
            smax: r[5] / base_mva,
            tap: if r[8] == 0.0 { 1.0 } else { r[8] },
            shift: r[9].to_radians(),
            theta_min: r[11].to_radians(),
            theta_max: r[12].to_radians(),
        });
    }
    Network::from_parts(base_mva, buses, branches, generators)
}

fn parse_cost(row: &[f64], row_no: usize) -> Result<CostCurve, CaseError> {
    let err = |message: String| CaseError::Table {
        table: "gencost".into(),
        row: row_no,
        message,
    };
    if row.len() < 4 {
        return Err(err("expected at least 4 columns".into()));
    }
    if row[0] != 2.0 {
        return Err(err(format!("unsupported cost model {}", row[0])));
    }
    let n = row[3] as usize;
    if !(1..=3).contains(&n) || row.len() < 4 + n {
        return Err(err(format!("invalid polynomial length {}", row[3])));
    }
    let coeffs = &row[4..4 + n];
    // highest order first
    let mut c = [0.0; 3];
    for (k, v) in coeffs.iter().rev().enumerate() {
        c[k] = *v;
    }
    Ok(CostCurve {
        c0: c[0],
        c1: c[1],
        c2: c[2],
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    pub const TWO_BUS: &str = r"
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1 0 135 1 1.1 0.9;
    2 1 50 0 0 0 1 1 0 135 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.01 40 0;
];
";
}
