//! Network model: buses, branches, generators, loads, admittance.
//!
//! Everything downstream works in per-unit on the system MVA base. Buses are
//! identified by their external integer ids in the input files; solvers use
//! dense positions `0..n_bus` obtained through [`Topology`].

pub mod matpower;
pub mod synthetic;

use std::collections::HashMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linalg::{Csr, Triplets};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    /// fixed voltage phasor, absorbs the power balance
    Slack,
    /// fixed active injection and voltage magnitude
    Pv,
    /// fixed active and reactive injection
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub v_min: f64,    // per-unit magnitude bounds
    pub v_max: f64,
    pub nominal_v: f64, // per-unit magnitude for flat starts
    #[serde(default)]
    pub shunt_g: f64, // per-unit shunt conductance
    #[serde(default)]
    pub shunt_b: f64, // per-unit shunt susceptance
}

fn default_tap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize, // external bus ids
    pub to_bus: usize,
    /// series admittance y = 1 / (r + jx), serialized as [re, im]
    pub series_admittance: Complex64,
    #[serde(default)]
    pub charging: f64, // total line charging susceptance
    #[serde(default = "default_tap")]
    pub tap: f64, // off-nominal turns ratio on the from side
    #[serde(default)]
    pub shift: f64, // phase shift in radians
    #[serde(default)]
    pub s_max: f64, // apparent power rating, 0 = unlimited
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_nom: f64, // scheduled active output
    pub v_nom: f64, // voltage magnitude setpoint
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// polynomial cost coefficients in ascending powers of the MW output
    #[serde(default)]
    pub cost: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub p_nom: f64,
    pub q_nom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
}

impl Network {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn from_json_str(text: &str) -> Result<Network> {
        let net: Network = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Load a case from disk, dispatching on the file extension
    /// (`.m` MATPOWER-style, `.json` the native schema).
    pub fn from_file(path: &std::path::Path) -> Result<Network> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("m") => matpower::parse(&text),
            Some("json") => Network::from_json_str(&text),
            other => Err(Error::Input(format!(
                "unsupported case extension {other:?} for {}",
                path.display()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::Validation("base MVA must be positive".into()));
        }
        if self.buses.is_empty() {
            return Err(Error::Validation("no buses".into()));
        }
        let mut pos = HashMap::with_capacity(self.buses.len());
        for (i, bus) in self.buses.iter().enumerate() {
            if pos.insert(bus.id, i).is_some() {
                return Err(Error::Validation(format!("duplicate bus id {}", bus.id)));
            }
            if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
                return Err(Error::Validation(format!(
                    "bus {}: need 0 < v_min <= v_max, got [{}, {}]",
                    bus.id, bus.v_min, bus.v_max
                )));
            }
            if !(bus.nominal_v > 0.0) {
                return Err(Error::Validation(format!(
                    "bus {}: nominal voltage must be positive",
                    bus.id
                )));
            }
        }
        let slacks: Vec<usize> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        if slacks.len() != 1 {
            return Err(Error::Validation(format!(
                "need exactly one slack bus, found {:?}",
                slacks
            )));
        }
        for br in &self.branches {
            for id in [br.from_bus, br.to_bus] {
                if !pos.contains_key(&id) {
                    return Err(Error::Validation(format!(
                        "branch {} -> {} references unknown bus id {}",
                        br.from_bus, br.to_bus, id
                    )));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(Error::Validation(format!(
                    "branch at bus {} connects a bus to itself",
                    br.from_bus
                )));
            }
            if !br.series_admittance.re.is_finite() || !br.series_admittance.im.is_finite() {
                return Err(Error::Validation(format!(
                    "branch {} -> {} has non-finite series admittance (zero impedance?)",
                    br.from_bus, br.to_bus
                )));
            }
            if !(br.tap > 0.0) {
                return Err(Error::Validation(format!(
                    "branch {} -> {}: tap ratio must be positive",
                    br.from_bus, br.to_bus
                )));
            }
            if br.s_max < 0.0 {
                return Err(Error::Validation(format!(
                    "branch {} -> {}: negative rating",
                    br.from_bus, br.to_bus
                )));
            }
        }
        for g in &self.generators {
            if !pos.contains_key(&g.bus) {
                return Err(Error::Validation(format!(
                    "generator references unknown bus id {}",
                    g.bus
                )));
            }
            if g.p_min > g.p_max || g.q_min > g.q_max {
                return Err(Error::Validation(format!(
                    "generator at bus {}: crossed limits",
                    g.bus
                )));
            }
        }
        for l in &self.loads {
            if !pos.contains_key(&l.bus) {
                return Err(Error::Validation(format!(
                    "load references unknown bus id {}",
                    l.bus
                )));
            }
        }

        // connectivity over the branch graph
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            let f = pos[&br.from_bus];
            let t = pos[&br.to_bus];
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        if count != n {
            let orphan = self.buses[seen.iter().position(|&s| !s).unwrap()].id;
            return Err(Error::Validation(format!(
                "network is not connected (bus {} unreachable from bus {})",
                orphan, self.buses[0].id
            )));
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        let pos: HashMap<usize, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        let n = self.buses.len();
        let mut gens_at = vec![Vec::new(); n];
        for (g, gen) in self.generators.iter().enumerate() {
            gens_at[pos[&gen.bus]].push(g);
        }
        let mut loads_at = vec![Vec::new(); n];
        for (l, load) in self.loads.iter().enumerate() {
            loads_at[pos[&load.bus]].push(l);
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut branch_ends = Vec::with_capacity(self.branches.len());
        for (bi, br) in self.branches.iter().enumerate() {
            let f = pos[&br.from_bus];
            let t = pos[&br.to_bus];
            branch_ends.push((f, t));
            adjacency[f].push((t, bi));
            adjacency[t].push((f, bi));
        }
        let slack = self
            .buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus");
        Topology {
            bus_pos: pos,
            gens_at,
            loads_at,
            adjacency,
            branch_ends,
            slack,
        }
    }
}

/// Positional lookups derived from a validated [`Network`].
#[derive(Debug, Clone)]
pub struct Topology {
    pub bus_pos: HashMap<usize, usize>,
    pub gens_at: Vec<Vec<usize>>,  // generator indices per bus position
    pub loads_at: Vec<Vec<usize>>, // load indices per bus position
    pub adjacency: Vec<Vec<(usize, usize)>>, // (neighbor position, branch index)
    pub branch_ends: Vec<(usize, usize)>, // (from, to) positions per branch
    pub slack: usize,              // slack bus position
}

/// Bus admittance matrix split into real and imaginary parts with a shared
/// sparsity pattern (graph adjacency plus the diagonal).
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub g: Csr,
    pub b: Csr,
}

/// Per-branch two-port admittance entries, used for admittance assembly and
/// branch flow evaluation.
#[derive(Debug, Clone)]
pub struct BranchStamp {
    pub from: usize, // bus positions
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
    pub y_series: Complex64,
    pub s_max: f64,
}

impl BranchStamp {
    /// Complex power entering the branch at the from side.
    pub fn flow_from(&self, v_from: Complex64, v_to: Complex64) -> Complex64 {
        let i_from = self.yff * v_from + self.yft * v_to;
        v_from * i_from.conj()
    }

    /// Squared series-element current magnitude |y (V_f - V_t)|^2.
    pub fn current_sq(&self, v_from: Complex64, v_to: Complex64) -> f64 {
        (self.y_series * (v_from - v_to)).norm_sqr()
    }
}

pub fn branch_stamps(net: &Network, topo: &Topology) -> Vec<BranchStamp> {
    net.branches
        .iter()
        .zip(&topo.branch_ends)
        .map(|(br, &(f, t))| {
            let ys = br.series_admittance;
            let ysh = Complex64::new(0.0, br.charging / 2.0);
            let tap = Complex64::from_polar(br.tap, br.shift);
            BranchStamp {
                from: f,
                to: t,
                yff: (ys + ysh) / (tap * tap.conj()),
                yft: -ys / tap.conj(),
                ytf: -ys / tap,
                ytt: ys + ysh,
                y_series: ys,
                s_max: br.s_max,
            }
        })
        .collect()
}

pub fn build_admittance(net: &Network, topo: &Topology) -> AdmittanceMatrix {
    let n = net.buses.len();
    let stamps = branch_stamps(net, topo);
    let mut gt = Triplets::with_capacity(n, n, 4 * stamps.len() + n);
    let mut bt = Triplets::with_capacity(n, n, 4 * stamps.len() + n);
    let mut push = |r: usize, c: usize, y: Complex64| {
        // both matrices get an entry so their patterns stay identical
        gt.push(r, c, y.re);
        bt.push(r, c, y.im);
    };
    for s in &stamps {
        push(s.from, s.from, s.yff);
        push(s.from, s.to, s.yft);
        push(s.to, s.from, s.ytf);
        push(s.to, s.to, s.ytt);
    }
    for (i, bus) in net.buses.iter().enumerate() {
        push(i, i, Complex64::new(bus.shunt_g, bus.shunt_b));
    }
    AdmittanceMatrix {
        g: gt.to_csr(),
        b: bt.to_csr(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy() -> Network {
        Network {
            base_mva: 100.0,
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Slack,
                    v_min: 0.9,
                    v_max: 1.1,
                    nominal_v: 1.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Pq,
                    v_min: 0.9,
                    v_max: 1.1,
                    nominal_v: 1.0,
                    shunt_g: 0.0,
                    shunt_b: 0.05,
                },
                Bus {
                    id: 5,
                    kind: BusKind::Pq,
                    v_min: 0.9,
                    v_max: 1.1,
                    nominal_v: 1.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                },
            ],
            branches: vec![
                Branch {
                    from_bus: 1,
                    to_bus: 2,
                    series_admittance: Complex64::new(1.0, -10.0),
                    charging: 0.04,
                    tap: 1.0,
                    shift: 0.0,
                    s_max: 2.5,
                },
                Branch {
                    from_bus: 2,
                    to_bus: 5,
                    series_admittance: Complex64::new(0.5, -5.0),
                    charging: 0.0,
                    tap: 0.98,
                    shift: 0.02,
                    s_max: 0.0,
                },
            ],
            generators: vec![Generator {
                bus: 1,
                p_nom: 0.8,
                v_nom: 1.02,
                p_min: 0.0,
                p_max: 2.0,
                q_min: -1.0,
                q_max: 1.0,
                cost: vec![0.0, 20.0, 0.05],
            }],
            loads: vec![Load {
                bus: 5,
                p_nom: 0.7,
                q_nom: 0.2,
            }],
        }
    }

    #[test]
    fn json_round_trip_preserves_every_field() {
        let net = toy();
        let text = net.to_json_string().unwrap();
        let back = Network::from_json_str(&text).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn validation_rejects_missing_slack_and_duplicates() {
        let mut net = toy();
        net.buses[0].kind = BusKind::Pv;
        assert!(matches!(net.validate(), Err(Error::Validation(_))));

        let mut net = toy();
        net.buses[1].id = 1;
        assert!(net.validate().is_err());
    }

    #[test]
    fn validation_requires_connectivity() {
        let mut net = toy();
        net.branches.pop();
        let err = net.validate().unwrap_err();
        assert!(err.to_string().contains("not connected"), "{err}");
    }

    #[test]
    fn validation_rejects_unknown_branch_endpoint() {
        let mut net = toy();
        net.branches[0].to_bus = 99;
        let err = net.validate().unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    /// Admittance assembly cross-checked against the per-branch two-port
    /// formulas evaluated with complex arithmetic.
    #[test]
    fn admittance_matches_complex_stamps() {
        let net = toy();
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let stamps = branch_stamps(&net, &topo);

        let n = net.n_bus();
        let mut dense = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for s in &stamps {
            dense[s.from][s.from] += s.yff;
            dense[s.from][s.to] += s.yft;
            dense[s.to][s.from] += s.ytf;
            dense[s.to][s.to] += s.ytt;
        }
        for (i, bus) in net.buses.iter().enumerate() {
            dense[i][i] += Complex64::new(bus.shunt_g, bus.shunt_b);
        }
        for i in 0..n {
            for j in 0..n {
                assert_relative_eq!(y.g.get(i, j), dense[i][j].re, epsilon = 1e-15);
                assert_relative_eq!(y.b.get(i, j), dense[i][j].im, epsilon = 1e-15);
            }
        }
        // pattern is adjacency plus diagonal, identical for G and B
        assert_eq!(y.g.row_ptr, y.b.row_ptr);
        assert_eq!(y.g.col_idx, y.b.col_idx);
        assert_eq!(y.g.nnz(), 3 + 2 * 2);
        // tap-free, shift-free matrix is symmetric
        let tap_branch = 1;
        assert!(net.branches[tap_branch].tap != 1.0);
        assert_relative_eq!(y.g.get(0, 1), y.g.get(1, 0), epsilon = 1e-15);
    }

    /// A lossless, shunt-free, tap-free network has zero row sums.
    #[test]
    fn admittance_row_sums_vanish_without_shunts() {
        let mut net = toy();
        net.buses[1].shunt_b = 0.0;
        for br in &mut net.branches {
            br.series_admittance = Complex64::new(0.0, -8.0);
            br.charging = 0.0;
            br.tap = 1.0;
            br.shift = 0.0;
        }
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        for i in 0..net.n_bus() {
            let (gs, bs): (f64, f64) = (
                y.g.row(i).1.iter().sum(),
                y.b.row(i).1.iter().sum(),
            );
            assert_relative_eq!(gs, 0.0, epsilon = 1e-14);
            assert_relative_eq!(bs, 0.0, epsilon = 1e-14);
        }
    }
}
