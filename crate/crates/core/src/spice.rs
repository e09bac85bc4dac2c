//! Chaos-expansion power flow.
//!
//! Every system variable (rectangular voltages, injections) is expanded in
//! the orthonormal basis and the power flow equations are Galerkin-projected
//! onto each basis function. The projected system is solved in stages:
//!
//!   1. deterministic power flow (the k = 0 subsystem),
//!   2. exact Newton solve of the degree <= 1 subsystem,
//!   3. sparsity mask from the degree-1 coefficients,
//!   4. masked, quartic-truncated degree-2 least squares.
//!
//! Stage 4 keeps every equation but only the unmasked unknowns, so the
//! system is overdetermined and solved with damped Gauss-Newton.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisFamily, MultiIndexSet, ProductTensors};
use crate::linalg::{lu_solve, norm2_sq, norm_inf, normal_matrix, solve_normal, Csr, Triplets};
use crate::net::{AdmittanceMatrix, BusKind, Network, Topology};
use crate::pf::{setpoint_magnitude, NewtonOptions, VoltageState};
use crate::stochastic::UncertaintyModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarClass {
    VRe,
    VIm,
    P,
    Q,
}

impl VarClass {
    pub const ALL: [VarClass; 4] = [VarClass::VRe, VarClass::VIm, VarClass::P, VarClass::Q];

    pub fn idx(self) -> usize {
        match self {
            VarClass::VRe => 0,
            VarClass::VIm => 1,
            VarClass::P => 2,
            VarClass::Q => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VarClass::VRe => "v_re",
            VarClass::VIm => "v_im",
            VarClass::P => "p",
            VarClass::Q => "q",
        }
    }
}

/// Expansion coefficients for every bus variable, k-major: entry
/// `k * n_bus + bus` is the coefficient of basis function k.
#[derive(Debug, Clone)]
pub struct PceCoefficients {
    pub family: BasisFamily,
    pub set: MultiIndexSet,
    pub n_bus: usize,
    pub vre: Vec<f64>,
    pub vim: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PceCoefficients {
    pub fn k(&self) -> usize {
        self.set.len()
    }

    pub fn class(&self, c: VarClass) -> &[f64] {
        match c {
            VarClass::VRe => &self.vre,
            VarClass::VIm => &self.vim,
            VarClass::P => &self.p,
            VarClass::Q => &self.q,
        }
    }

    pub fn class_mut(&mut self, c: VarClass) -> &mut [f64] {
        match c {
            VarClass::VRe => &mut self.vre,
            VarClass::VIm => &mut self.vim,
            VarClass::P => &mut self.p,
            VarClass::Q => &mut self.q,
        }
    }

    pub fn get(&self, c: VarClass, bus: usize, k: usize) -> f64 {
        self.class(c)[k * self.n_bus + bus]
    }

    /// The k = 0 voltage coefficients as a deterministic state (the mean
    /// operating point).
    pub fn mean_state(&self) -> VoltageState {
        VoltageState {
            re: self.vre[..self.n_bus].to_vec(),
            im: self.vim[..self.n_bus].to_vec(),
        }
    }
}

/// Keep/drop decisions for degree-2 coefficients, per variable.
/// Degree 0 and 1 entries are always kept.
#[derive(Debug, Clone)]
pub struct SparsityMask {
    pub n_bus: usize,
    pub n_k: usize,
    keep: Vec<bool>,
}

impl SparsityMask {
    pub fn all_keep(n_bus: usize, n_k: usize) -> SparsityMask {
        SparsityMask {
            n_bus,
            n_k,
            keep: vec![true; 4 * n_bus * n_k],
        }
    }

    fn slot(&self, c: VarClass, bus: usize, k: usize) -> usize {
        (c.idx() * self.n_bus + bus) * self.n_k + k
    }

    pub fn keep(&self, c: VarClass, bus: usize, k: usize) -> bool {
        self.keep[self.slot(c, bus, k)]
    }

    /// Fraction of degree-2 coefficient slots that are dropped, over all
    /// four variable classes.
    pub fn dropped_fraction(&self, set: &MultiIndexSet) -> f64 {
        let deg2: Vec<usize> = (0..set.len())
            .filter(|&k| set.total_degree(k) == 2)
            .collect();
        if deg2.is_empty() {
            return 0.0;
        }
        let mut dropped = 0usize;
        for c in VarClass::ALL {
            for bus in 0..self.n_bus {
                for &k in &deg2 {
                    if !self.keep(c, bus, k) {
                        dropped += 1;
                    }
                }
            }
        }
        dropped as f64 / (4 * self.n_bus * deg2.len()) as f64
    }

    /// Zero every dropped coefficient in place.
    pub fn zero_dropped(&self, coeffs: &mut PceCoefficients) {
        let n = self.n_bus;
        for c in VarClass::ALL {
            let data = coeffs.class_mut(c);
            for bus in 0..n {
                for k in 0..self.n_k {
                    if !self.keep[(c.idx() * n + bus) * self.n_k + k] {
                        data[k * n + bus] = 0.0;
                    }
                }
            }
        }
    }
}

/// Drop a variable's degree-2 coefficient for dimension pair (a, b) when
/// |X1_a * X1_b| < c_off * max_d |X1_d|. A variable with an all-zero
/// degree-1 vector gives no signal, so everything is kept for it.
pub fn build_mask(deg1: &PceCoefficients, c_off: f64) -> SparsityMask {
    let set = &deg1.set;
    let n = deg1.n_bus;
    let mut mask = SparsityMask::all_keep(n, set.len());
    let deg1_pos: Vec<usize> = (0..set.n)
        .map(|a| {
            let mut e = vec![0u8; set.n];
            e[a] = 1;
            set.position_of(&e).expect("degree-1 index present")
        })
        .collect();
    for c in VarClass::ALL {
        let data = deg1.class(c);
        for bus in 0..n {
            let x1: Vec<f64> = deg1_pos.iter().map(|&k| data[k * n + bus]).collect();
            let max = x1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max == 0.0 {
                continue;
            }
            for k in 0..set.len() {
                if set.total_degree(k) != 2 {
                    continue;
                }
                let (a, b) = match *set.nonzero_exponents(k) {
                    [(a, 2)] => (a, a),
                    [(a, 1), (b, 1)] => (a, b),
                    _ => unreachable!("degree-2 index has one or two active dimensions"),
                };
                if (x1[a] * x1[b]).abs() < c_off * max {
                    let slot = mask.slot(c, bus, k);
                    mask.keep[slot] = false;
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy)]
pub struct SpiceConfig {
    pub c_off: f64,
    pub truncate_quartic: bool,
    /// Newton settings for the square stages (deterministic and degree 1)
    pub newton: NewtonOptions,
    pub grad_tol: f64,
    pub obj_decrease_tol: f64,
    pub max_iterations: usize,
}

impl Default for SpiceConfig {
    fn default() -> Self {
        SpiceConfig {
            c_off: 1e-10,
            truncate_quartic: true,
            newton: NewtonOptions::default(),
            grad_tol: 1e-8,
            obj_decrease_tol: 1e-14,
            max_iterations: 100,
        }
    }
}

impl SpiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_off < 0.0 {
            return Err(Error::Validation(format!(
                "coefficient cutoff must be nonnegative, got {}",
                self.c_off
            )));
        }
        Ok(())
    }
}

/// Per-bus boundary conditions of the projected system, one target value per
/// basis function. PV voltage-squared and slack voltage targets are nonzero
/// only at k = 0.
#[derive(Debug, Clone)]
pub enum BusTargets {
    Slack { v_re: f64 },
    Pv { p: Vec<f64>, v_sq: f64 },
    Pq { p: Vec<f64>, q: Vec<f64> },
}

/// Galerkin projection of the affine injection model onto the basis:
/// nominal net injections at k = 0, the per-area sensitivities on the
/// matching degree-1 index, zero elsewhere. Returned k-major per bus.
pub fn overload_injections(
    net: &Network,
    topo: &Topology,
    model: &UncertaintyModel,
    set: &MultiIndexSet,
) -> (Vec<f64>, Vec<f64>) {
    let coeffs = model.linear_injections(net, topo);
    let n = net.n_bus();
    let kk = set.len();
    let mut p = vec![0.0; kk * n];
    let mut q = vec![0.0; kk * n];
    p[..n].copy_from_slice(&coeffs.p0);
    q[..n].copy_from_slice(&coeffs.q0);
    for a in 0..set.n {
        let mut e = vec![0u8; set.n];
        e[a] = 1;
        let k = set.position_of(&e).expect("degree-1 index present");
        p[k * n..(k + 1) * n].copy_from_slice(&coeffs.dp[a]);
        q[k * n..(k + 1) * n].copy_from_slice(&coeffs.dq[a]);
    }
    (p, q)
}

/// Standard boundary conditions: PQ buses pin their injection coefficients,
/// PV buses pin active power and squared magnitude, the slack pins its
/// phasor coefficients.
pub fn bus_targets(
    net: &Network,
    topo: &Topology,
    set: &MultiIndexSet,
    p_k: &[f64],
    q_k: &[f64],
) -> Vec<BusTargets> {
    let n = net.n_bus();
    let kk = set.len();
    net.buses
        .iter()
        .enumerate()
        .map(|(i, bus)| {
            let p: Vec<f64> = (0..kk).map(|k| p_k[k * n + i]).collect();
            match bus.kind {
                BusKind::Slack => BusTargets::Slack {
                    v_re: setpoint_magnitude(net, topo, i),
                },
                BusKind::Pv => BusTargets::Pv {
                    p,
                    v_sq: setpoint_magnitude(net, topo, i).powi(2),
                },
                BusKind::Pq => BusTargets::Pq {
                    p,
                    q: (0..kk).map(|k| q_k[k * n + i]).collect(),
                },
            }
        })
        .collect()
}

/// Nominal sizes of the per-equation double sum: all K^2 ordered pairs, and
/// the count left after dropping pairs where both factors have degree 2.
pub fn pair_counts(set: &MultiIndexSet) -> (usize, usize) {
    let kk = set.len();
    let k1 = set.count_deg_le_1();
    (kk * kk, 2 * k1 * kk - k1 * k1)
}

/// The projected power flow equations over a chosen range of basis indices.
///
/// Equations exist for every (bus, k < k_eq); unknowns are the voltage
/// coefficients (bus, k < k_unknown) minus masked entries. Coefficient
/// arrays passed to `residual`/`jacobian` are always full length
/// (n_bus * K); entries outside the unknown range must be zero.
pub struct GalerkinSystem<'a> {
    y: &'a AdmittanceMatrix,
    targets: &'a [BusTargets],
    n: usize,
    k_eq: usize,
    k_unknown: usize,
    /// per target k: runs of (k1, [(k2, value)]) from the triple tensor,
    /// truncation already applied
    grouped: Vec<Vec<(usize, Vec<(usize, f64)>)>>,
    col_vre: Vec<usize>,
    col_vim: Vec<usize>,
    n_unknowns: usize,
    pub tensor_entries: usize,
}

const NO_COL: usize = usize::MAX;

impl<'a> GalerkinSystem<'a> {
    pub fn new(
        y: &'a AdmittanceMatrix,
        tensors: &'a ProductTensors,
        targets: &'a [BusTargets],
        k_eq: usize,
        k_unknown: usize,
        truncate: bool,
        mask: Option<&SparsityMask>,
    ) -> GalerkinSystem<'a> {
        let set = &tensors.set;
        let n = targets.len();
        let mut tensor_entries = 0usize;
        let grouped: Vec<Vec<(usize, Vec<(usize, f64)>)>> = (0..k_eq)
            .map(|k| {
                let mut runs: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
                for &(k1, k2, t) in tensors.pairs(k) {
                    let (k1, k2) = (k1 as usize, k2 as usize);
                    if k1 >= k_unknown || k2 >= k_unknown {
                        continue;
                    }
                    if truncate && set.total_degree(k1) == 2 && set.total_degree(k2) == 2 {
                        continue;
                    }
                    tensor_entries += 1;
                    match runs.last_mut() {
                        Some((first, sub)) if *first == k1 => sub.push((k2, t)),
                        _ => runs.push((k1, vec![(k2, t)])),
                    }
                }
                runs
            })
            .collect();

        let keep = |class: VarClass, i: usize, k: usize| match mask {
            Some(m) if set.total_degree(k) == 2 => m.keep(class, i, k),
            _ => true,
        };
        let mut col_vre = vec![NO_COL; n * k_unknown];
        let mut col_vim = vec![NO_COL; n * k_unknown];
        let mut next = 0usize;
        for k in 0..k_unknown {
            for i in 0..n {
                if keep(VarClass::VRe, i, k) {
                    col_vre[k * n + i] = next;
                    next += 1;
                }
                if keep(VarClass::VIm, i, k) {
                    col_vim[k * n + i] = next;
                    next += 1;
                }
            }
        }
        GalerkinSystem {
            y,
            targets,
            n,
            k_eq,
            k_unknown,
            grouped,
            col_vre,
            col_vim,
            n_unknowns: next,
            tensor_entries,
        }
    }

    pub fn n_equations(&self) -> usize {
        2 * self.n * self.k_eq
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_unknowns
    }

    pub fn pack(&self, vre: &[f64], vim: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_unknowns];
        for s in 0..self.n * self.k_unknown {
            if self.col_vre[s] != NO_COL {
                x[self.col_vre[s]] = vre[s];
            }
            if self.col_vim[s] != NO_COL {
                x[self.col_vim[s]] = vim[s];
            }
        }
        x
    }

    /// Write the packed unknowns back into full arrays. Masked and
    /// out-of-range entries are left untouched (the caller keeps them zero).
    pub fn unpack(&self, x: &[f64], vre: &mut [f64], vim: &mut [f64]) {
        for s in 0..self.n * self.k_unknown {
            if self.col_vre[s] != NO_COL {
                vre[s] = x[self.col_vre[s]];
            }
            if self.col_vim[s] != NO_COL {
                vim[s] = x[self.col_vim[s]];
            }
        }
    }

    /// Galerkin-projected currents alpha + j beta = (Y V)_k per coefficient.
    fn currents(&self, vre: &[f64], vim: &[f64], k_upto: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut al = vec![0.0; n * k_upto];
        let mut be = vec![0.0; n * k_upto];
        for k in 0..k_upto {
            let vr = &vre[k * n..(k + 1) * n];
            let vi = &vim[k * n..(k + 1) * n];
            for i in 0..n {
                let (cols, gv) = self.y.g.row(i);
                let (_, bv) = self.y.b.row(i);
                let mut a = 0.0;
                let mut b = 0.0;
                for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                    a += gij * vr[j] - bij * vi[j];
                    b += gij * vi[j] + bij * vr[j];
                }
                al[k * n + i] = a;
                be[k * n + i] = b;
            }
        }
        (al, be)
    }

    /// Residual, two rows per (k, bus): index 2(k n + i) is the p-type row,
    /// the next one the q / |V|^2 / phasor row.
    pub fn residual(&self, vre: &[f64], vim: &[f64]) -> Vec<f64> {
        let n = self.n;
        let (al, be) = self.currents(vre, vim, self.k_unknown);
        let mut r = vec![0.0; self.n_equations()];
        let mut pk = vec![0.0; n];
        let mut qk = vec![0.0; n];
        let mut v2k = vec![0.0; n];
        for k in 0..self.k_eq {
            pk.fill(0.0);
            qk.fill(0.0);
            v2k.fill(0.0);
            for (k1, sub) in &self.grouped[k] {
                let vr1 = &vre[k1 * n..(k1 + 1) * n];
                let vi1 = &vim[k1 * n..(k1 + 1) * n];
                for &(k2, t) in sub {
                    let a2 = &al[k2 * n..(k2 + 1) * n];
                    let b2 = &be[k2 * n..(k2 + 1) * n];
                    let vr2 = &vre[k2 * n..(k2 + 1) * n];
                    let vi2 = &vim[k2 * n..(k2 + 1) * n];
                    for i in 0..n {
                        pk[i] += t * (vr1[i] * a2[i] + vi1[i] * b2[i]);
                        qk[i] += t * (vi1[i] * a2[i] - vr1[i] * b2[i]);
                        v2k[i] += t * (vr1[i] * vr2[i] + vi1[i] * vi2[i]);
                    }
                }
            }
            for i in 0..n {
                let (rp, rq) = match &self.targets[i] {
                    BusTargets::Slack { v_re } => (
                        vre[k * n + i] - if k == 0 { *v_re } else { 0.0 },
                        vim[k * n + i],
                    ),
                    BusTargets::Pv { p, v_sq } => {
                        (pk[i] - p[k], v2k[i] - if k == 0 { *v_sq } else { 0.0 })
                    }
                    BusTargets::Pq { p, q } => (pk[i] - p[k], qk[i] - q[k]),
                };
                r[2 * (k * n + i)] = rp;
                r[2 * (k * n + i) + 1] = rq;
            }
        }
        r
    }

    /// Jacobian with respect to the packed unknowns.
    ///
    /// For each (target k, factor block k1) the chain rule gives per-bus
    /// scalars A = sum t*alpha, B = sum t*beta, C = sum t*vre, D = sum t*vim
    /// over the (k2, t) entries; the p-row then gets A (and B) on the
    /// diagonal plus the admittance row scaled by C and D.
    pub fn jacobian(&self, vre: &[f64], vim: &[f64]) -> Triplets {
        let n = self.n;
        let (al, be) = self.currents(vre, vim, self.k_unknown);
        let mut t = Triplets::with_capacity(
            self.n_equations(),
            self.n_unknowns,
            self.tensor_entries * 8,
        );
        let mut aa = vec![0.0; n];
        let mut bb = vec![0.0; n];
        let mut cc = vec![0.0; n];
        let mut dd = vec![0.0; n];
        for k in 0..self.k_eq {
            for (k1, sub) in &self.grouped[k] {
                aa.fill(0.0);
                bb.fill(0.0);
                cc.fill(0.0);
                dd.fill(0.0);
                for &(k2, tv) in sub {
                    let a2 = &al[k2 * n..(k2 + 1) * n];
                    let b2 = &be[k2 * n..(k2 + 1) * n];
                    let vr2 = &vre[k2 * n..(k2 + 1) * n];
                    let vi2 = &vim[k2 * n..(k2 + 1) * n];
                    for i in 0..n {
                        aa[i] += tv * a2[i];
                        bb[i] += tv * b2[i];
                        cc[i] += tv * vr2[i];
                        dd[i] += tv * vi2[i];
                    }
                }
                for i in 0..n {
                    let rp = 2 * (k * n + i);
                    let rq = rp + 1;
                    match &self.targets[i] {
                        BusTargets::Slack { .. } => {}
                        BusTargets::Pv { .. } => {
                            self.push_p_row(&mut t, rp, i, *k1, &aa, &bb, &cc, &dd);
                            let s = k1 * n + i;
                            if self.col_vre[s] != NO_COL {
                                t.push(rq, self.col_vre[s], 2.0 * cc[i]);
                            }
                            if self.col_vim[s] != NO_COL {
                                t.push(rq, self.col_vim[s], 2.0 * dd[i]);
                            }
                        }
                        BusTargets::Pq { .. } => {
                            self.push_p_row(&mut t, rp, i, *k1, &aa, &bb, &cc, &dd);
                            let (cols, gv) = self.y.g.row(i);
                            let (_, bv) = self.y.b.row(i);
                            for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                                let s = k1 * n + j;
                                if self.col_vre[s] != NO_COL {
                                    t.push(rq, self.col_vre[s], gij * dd[i] - bij * cc[i]);
                                }
                                if self.col_vim[s] != NO_COL {
                                    t.push(rq, self.col_vim[s], -bij * dd[i] - gij * cc[i]);
                                }
                            }
                            let s = k1 * n + i;
                            if self.col_vre[s] != NO_COL {
                                t.push(rq, self.col_vre[s], -bb[i]);
                            }
                            if self.col_vim[s] != NO_COL {
                                t.push(rq, self.col_vim[s], aa[i]);
                            }
                        }
                    }
                }
            }
            // slack rows are the identity on that bus's own coefficient
            for i in 0..n {
                if let BusTargets::Slack { .. } = self.targets[i] {
                    if k < self.k_unknown {
                        let s = k * n + i;
                        if self.col_vre[s] != NO_COL {
                            t.push(2 * (k * n + i), self.col_vre[s], 1.0);
                        }
                        if self.col_vim[s] != NO_COL {
                            t.push(2 * (k * n + i) + 1, self.col_vim[s], 1.0);
                        }
                    }
                }
            }
        }
        t
    }

    #[allow(clippy::too_many_arguments)]
    fn push_p_row(
        &self,
        t: &mut Triplets,
        row: usize,
        i: usize,
        k1: usize,
        aa: &[f64],
        bb: &[f64],
        cc: &[f64],
        dd: &[f64],
    ) {
        let n = self.n;
        let (cols, gv) = self.y.g.row(i);
        let (_, bv) = self.y.b.row(i);
        for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
            let s = k1 * n + j;
            if self.col_vre[s] != NO_COL {
                t.push(row, self.col_vre[s], gij * cc[i] + bij * dd[i]);
            }
            if self.col_vim[s] != NO_COL {
                t.push(row, self.col_vim[s], -bij * cc[i] + gij * dd[i]);
            }
        }
        let s = k1 * n + i;
        if self.col_vre[s] != NO_COL {
            t.push(row, self.col_vre[s], aa[i]);
        }
        if self.col_vim[s] != NO_COL {
            t.push(row, self.col_vim[s], bb[i]);
        }
    }
}

/// Square Newton solve of a Galerkin system (k_eq == k_unknown, no mask),
/// with the same halving damping as the deterministic solver. Operates on
/// and returns full-length coefficient arrays.
pub fn newton_square(
    sys: &GalerkinSystem,
    mut vre: Vec<f64>,
    mut vim: Vec<f64>,
    opts: NewtonOptions,
    what: &str,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    assert_eq!(sys.n_equations(), sys.n_unknowns());
    let mut res = sys.residual(&vre, &vim);
    let mut norm = norm_inf(&res);
    for iter in 0..opts.max_iter {
        if norm <= opts.tol {
            return Ok((vre, vim, iter));
        }
        let jac = sys.jacobian(&vre, &vim);
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        let step = lu_solve(&jac, &rhs)?;
        let x = sys.pack(&vre, &vim);
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = x
                .iter()
                .zip(&step)
                .map(|(xi, si)| xi + alpha * si)
                .collect();
            let mut tre = vre.clone();
            let mut tim = vim.clone();
            sys.unpack(&trial, &mut tre, &mut tim);
            let trial_res = sys.residual(&tre, &tim);
            let trial_norm = norm_inf(&trial_res);
            if trial_norm < norm || alpha < 1.0 / 64.0 {
                let stalled = trial_norm >= norm;
                vre = tre;
                vim = tim;
                res = trial_res;
                norm = trial_norm;
                if stalled {
                    return Err(Error::NonConvergence {
                        what: format!("{what} (stalled)"),
                        iterations: iter + 1,
                        residual: norm,
                    });
                }
                break;
            }
            alpha *= 0.5;
        }
    }
    if norm <= opts.tol {
        return Ok((vre, vim, opts.max_iter));
    }
    Err(Error::NonConvergence {
        what: what.into(),
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// Result of the damped Gauss-Newton refinement.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub vre: Vec<f64>,
    pub vim: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// objective after each accepted step, starting with the warm start
    pub objective_trace: Vec<f64>,
}

/// Minimize the squared residual norm over the unmasked coefficients with
/// Levenberg-damped Gauss-Newton. Never fails: on stagnation the best
/// iterate is returned with `converged = false`.
pub fn solve_degree2(
    sys: &GalerkinSystem,
    vre0: &[f64],
    vim0: &[f64],
    cfg: &SpiceConfig,
) -> RefineOutcome {
    let mut vre = vre0.to_vec();
    let mut vim = vim0.to_vec();
    let mut res = sys.residual(&vre, &vim);
    let mut obj = norm2_sq(&res);
    let mut lambda = 1e-8;
    let mut trace = vec![obj];
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        let jac: Csr = sys.jacobian(&vre, &vim).to_csr();
        let mut grad = vec![0.0; sys.n_unknowns()];
        jac.tmatvec(&res, &mut grad);
        grad_norm = norm_inf(&grad);
        if grad_norm <= cfg.grad_tol {
            converged = true;
            break;
        }
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let x = sys.pack(&vre, &vim);

        let mut accepted = false;
        for _ in 0..30 {
            let step = match solve_normal(&normal_matrix(&jac, lambda), &rhs) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + si).collect();
            let mut tre = vre.clone();
            let mut tim = vim.clone();
            sys.unpack(&trial, &mut tre, &mut tim);
            let trial_res = sys.residual(&tre, &tim);
            let trial_obj = norm2_sq(&trial_res);
            if trial_obj < obj {
                let decrease = obj - trial_obj;
                vre = tre;
                vim = tim;
                res = trial_res;
                obj = trial_obj;
                lambda /= 10.0;
                iterations += 1;
                trace.push(obj);
                accepted = true;
                if decrease < cfg.obj_decrease_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            break;
        }
    }
    RefineOutcome {
        vre,
        vim,
        iterations,
        objective: obj,
        grad_norm,
        converged,
        objective_trace: trace,
    }
}

/// Exact projection of the realized injections p + jq = diag(V) conj(YV)
/// onto the basis, using the full tensor (no truncation or masking).
pub fn project_power(
    y: &AdmittanceMatrix,
    tensors: &ProductTensors,
    vre: &[f64],
    vim: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let kk = tensors.set.len();
    let mut al = vec![0.0; n * kk];
    let mut be = vec![0.0; n * kk];
    for k in 0..kk {
        let vr = &vre[k * n..(k + 1) * n];
        let vi = &vim[k * n..(k + 1) * n];
        for i in 0..n {
            let (cols, gv) = y.g.row(i);
            let (_, bv) = y.b.row(i);
            let mut a = 0.0;
            let mut b = 0.0;
            for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                a += gij * vr[j] - bij * vi[j];
                b += gij * vi[j] + bij * vr[j];
            }
            al[k * n + i] = a;
            be[k * n + i] = b;
        }
    }
    let mut p = vec![0.0; kk * n];
    let mut q = vec![0.0; kk * n];
    for k in 0..kk {
        for &(k1, k2, t) in tensors.pairs(k) {
            let (k1, k2) = (k1 as usize, k2 as usize);
            for i in 0..n {
                let vr1 = vre[k1 * n + i];
                let vi1 = vim[k1 * n + i];
                let a2 = al[k2 * n + i];
                let b2 = be[k2 * n + i];
                p[k * n + i] += t * (vr1 * a2 + vi1 * b2);
                q[k * n + i] += t * (vi1 * a2 - vr1 * b2);
            }
        }
    }
    (p, q)
}

fn assemble_coefficients(
    y: &AdmittanceMatrix,
    tensors: &ProductTensors,
    n: usize,
    vre: Vec<f64>,
    vim: Vec<f64>,
    mask: Option<&SparsityMask>,
) -> PceCoefficients {
    let (p, q) = project_power(y, tensors, &vre, &vim, n);
    let mut coeffs = PceCoefficients {
        family: tensors.family,
        set: tensors.set.clone(),
        n_bus: n,
        vre,
        vim,
        p,
        q,
    };
    if let Some(m) = mask {
        m.zero_dropped(&mut coeffs);
    }
    coeffs
}

#[derive(Debug, Clone, Serialize)]
pub struct SpiceDiagnostics {
    /// wall time of the four stages (deterministic, degree-1, mask, degree-2)
    pub stage_seconds: [f64; 4],
    pub pf_iterations: usize,
    pub deg1_iterations: usize,
    pub deg2_iterations: usize,
    pub deg2_objective: f64,
    pub deg2_converged: bool,
    pub sparsity_fraction: f64,
    /// residual of the final coefficients under the full (untruncated,
    /// unmasked) projected equations, infinity norm
    pub galerkin_residual: f64,
    /// nominal double-sum sizes per equation: all pairs vs after truncation
    pub full_pair_count: usize,
    pub used_pair_count: usize,
    /// nonzero triple-product entries actually assembled
    pub tensor_entries: usize,
}

#[derive(Debug, Clone)]
pub struct SpiceOutcome {
    pub coefficients: PceCoefficients,
    pub mask: SparsityMask,
    pub diagnostics: SpiceDiagnostics,
}

/// The staged sparse solver on explicit boundary conditions. `start` seeds
/// the deterministic stage.
pub fn spice_with_targets(
    y: &AdmittanceMatrix,
    tensors: &ProductTensors,
    targets: &[BusTargets],
    start: &VoltageState,
    cfg: &SpiceConfig,
) -> Result<SpiceOutcome> {
    cfg.validate()?;
    let set = &tensors.set;
    let n = targets.len();
    let kk = set.len();
    let k1 = set.count_deg_le_1();

    let mut vre = vec![0.0; n * kk];
    let mut vim = vec![0.0; n * kk];
    vre[..n].copy_from_slice(&start.re);
    vim[..n].copy_from_slice(&start.im);

    let t0 = Instant::now();
    let sys0 = GalerkinSystem::new(y, tensors, targets, 1, 1, false, None);
    let (vre, vim, pf_iterations) =
        newton_square(&sys0, vre, vim, cfg.newton, "deterministic power flow")?;
    let t1 = Instant::now();

    let sys1 = GalerkinSystem::new(y, tensors, targets, k1, k1, false, None);
    let (vre, vim, deg1_iterations) =
        newton_square(&sys1, vre, vim, cfg.newton, "degree-1 expansion")?;
    let t2 = Instant::now();

    let deg1 = assemble_coefficients(y, tensors, n, vre.clone(), vim.clone(), None);
    let mask = build_mask(&deg1, cfg.c_off);
    let t3 = Instant::now();

    let sys2 = GalerkinSystem::new(
        y,
        tensors,
        targets,
        kk,
        kk,
        cfg.truncate_quartic,
        Some(&mask),
    );
    let refined = solve_degree2(&sys2, &vre, &vim, cfg);
    let t4 = Instant::now();

    let full_sys = GalerkinSystem::new(y, tensors, targets, kk, kk, false, None);
    let galerkin_residual = norm_inf(&full_sys.residual(&refined.vre, &refined.vim));
    let (full_pair_count, used_pair_count) = pair_counts(set);
    let diagnostics = SpiceDiagnostics {
        stage_seconds: [
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            (t4 - t3).as_secs_f64(),
        ],
        pf_iterations,
        deg1_iterations,
        deg2_iterations: refined.iterations,
        deg2_objective: refined.objective,
        deg2_converged: refined.converged,
        sparsity_fraction: mask.dropped_fraction(set),
        galerkin_residual,
        full_pair_count,
        used_pair_count: if cfg.truncate_quartic {
            used_pair_count
        } else {
            full_pair_count
        },
        tensor_entries: sys2.tensor_entries,
    };
    log::info!(
        "spice stages: pf {:.3}s ({} it), deg1 {:.3}s ({} it), mask {:.3}s, deg2 {:.3}s ({} it, obj {:.3e}), sparsity {:.1}%",
        diagnostics.stage_seconds[0],
        pf_iterations,
        diagnostics.stage_seconds[1],
        deg1_iterations,
        diagnostics.stage_seconds[2],
        diagnostics.stage_seconds[3],
        refined.iterations,
        refined.objective,
        100.0 * diagnostics.sparsity_fraction,
    );
    let coefficients = assemble_coefficients(y, tensors, n, refined.vre, refined.vim, Some(&mask));
    Ok(SpiceOutcome {
        coefficients,
        mask,
        diagnostics,
    })
}

/// The staged solver with standard boundary conditions from the network and
/// uncertainty model.
pub fn spice(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    model: &UncertaintyModel,
    tensors: &ProductTensors,
    cfg: &SpiceConfig,
) -> Result<SpiceOutcome> {
    let (p_k, q_k) = overload_injections(net, topo, model, &tensors.set);
    let targets = bus_targets(net, topo, &tensors.set, &p_k, &q_k);
    let start = VoltageState::flat(net, topo);
    spice_with_targets(y, tensors, &targets, &start, cfg)
}

/// Full square degree-2 solve (every coefficient an unknown, no truncation):
/// the expensive reference that the staged solver approximates.
pub fn pce_full_with_targets(
    y: &AdmittanceMatrix,
    tensors: &ProductTensors,
    targets: &[BusTargets],
    start: &VoltageState,
    opts: NewtonOptions,
) -> Result<(PceCoefficients, usize)> {
    let set = &tensors.set;
    let n = targets.len();
    let kk = set.len();
    let k1 = set.count_deg_le_1();
    let mut vre = vec![0.0; n * kk];
    let mut vim = vec![0.0; n * kk];
    vre[..n].copy_from_slice(&start.re);
    vim[..n].copy_from_slice(&start.im);
    let sys0 = GalerkinSystem::new(y, tensors, targets, 1, 1, false, None);
    let (vre, vim, _) = newton_square(&sys0, vre, vim, opts, "deterministic power flow")?;
    let sys1 = GalerkinSystem::new(y, tensors, targets, k1, k1, false, None);
    let (vre, vim, _) = newton_square(&sys1, vre, vim, opts, "degree-1 expansion")?;
    let sys2 = GalerkinSystem::new(y, tensors, targets, kk, kk, false, None);
    let (vre, vim, iterations) =
        newton_square(&sys2, vre, vim, opts, "full degree-2 expansion")?;
    Ok((
        assemble_coefficients(y, tensors, n, vre, vim, None),
        iterations,
    ))
}

pub fn pce_full(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    model: &UncertaintyModel,
    tensors: &ProductTensors,
    opts: NewtonOptions,
) -> Result<(PceCoefficients, usize)> {
    let (p_k, q_k) = overload_injections(net, topo, model, &tensors.set);
    let targets = bus_targets(net, topo, &tensors.set, &p_k, &q_k);
    let start = VoltageState::flat(net, topo);
    pce_full_with_targets(y, tensors, &targets, &start, opts)
}
