//! Iterative chance-constrained optimal power flow.
//!
//! The driver alternates two steps: a deterministic AC-OPF against a set of
//! effective (possibly tightened) operating limits, and a quantile evaluation
//! of the fitted expansion at the resulting dispatch. Wherever a quantile
//! spills over an original limit, the effective limit moves inward by the
//! excess, so the next dispatch leaves room for the fluctuations. Limits only
//! ever tighten; a closed window means the instance is infeasible.
//!
//! The bundled OPF is a reference implementation: a quadratic-penalty method
//! whose inner loop is Levenberg-Marquardt on the rectangular power flow
//! equations, followed by an exact power flow restoration at the optimized
//! setpoints. Any dispatch engine producing an [`OperatingPoint`] can be
//! substituted.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::basis::ProductTensors;
use crate::linalg::{self, Csr, Triplets};
use crate::net::{branch_stamps, AdmittanceMatrix, BranchStamp, Network, Topology};
use crate::pf::{self, BusCondition, NewtonOptions, PfSpec, VoltageState};
use crate::spice::{spice, SpiceConfig, SpiceOutcome};
use crate::stochastic::{SampleBatch, UncertaintyModel};
use crate::uq::{self, quantile, MonitoredSamples, QuantileSide};
use crate::{Error, Result};

/// Operating limits the OPF must respect, tightened in place as the
/// chance-constraint loop proceeds. Indexed by bus position, branch index,
/// and generator index. A branch rating of zero means unlimited.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveLimits {
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub s_max: Vec<f64>,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
}

impl EffectiveLimits {
    pub fn originals(net: &Network) -> EffectiveLimits {
        EffectiveLimits {
            v_min: net.buses.iter().map(|b| b.v_min).collect(),
            v_max: net.buses.iter().map(|b| b.v_max).collect(),
            s_max: net.branches.iter().map(|b| b.s_max).collect(),
            p_min: net.generators.iter().map(|g| g.p_min).collect(),
            p_max: net.generators.iter().map(|g| g.p_max).collect(),
            q_min: net.generators.iter().map(|g| g.q_min).collect(),
            q_max: net.generators.iter().map(|g| g.q_max).collect(),
        }
    }

    /// A tightened window that closed means no dispatch can satisfy the
    /// chance constraints.
    fn check_open(&self, net: &Network) -> Result<()> {
        for (i, bus) in net.buses.iter().enumerate() {
            if self.v_min[i] > self.v_max[i] {
                return Err(Error::Infeasible(format!(
                    "voltage window closed at bus {} ({:.6} > {:.6})",
                    bus.id, self.v_min[i], self.v_max[i]
                )));
            }
        }
        for (b, br) in net.branches.iter().enumerate() {
            if br.s_max > 0.0 && self.s_max[b] <= 0.0 {
                return Err(Error::Infeasible(format!(
                    "flow rating closed on branch {}->{}",
                    br.from_bus, br.to_bus
                )));
            }
        }
        for (g, gen) in net.generators.iter().enumerate() {
            if self.p_min[g] > self.p_max[g] || self.q_min[g] > self.q_max[g] {
                return Err(Error::Infeasible(format!(
                    "generator {} box closed at bus {}",
                    g, gen.bus
                )));
            }
        }
        Ok(())
    }
}

/// Polynomial cost in ascending powers, argument in MW.
fn poly(c: &[f64], p_mw: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * p_mw + ck)
}

fn poly_d1(c: &[f64], p_mw: f64) -> f64 {
    let mut acc = 0.0;
    for d in (1..c.len()).rev() {
        acc = acc * p_mw + d as f64 * c[d];
    }
    acc
}

fn poly_d2(c: &[f64], p_mw: f64) -> f64 {
    let mut acc = 0.0;
    for d in (2..c.len()).rev() {
        acc = acc * p_mw + (d * (d - 1)) as f64 * c[d];
    }
    acc
}

#[derive(Debug, Clone, Copy)]
pub struct OpfOptions {
    pub grad_tol: f64,
    pub feas_tol: f64,
    pub max_inner: usize,
    pub rho_init: f64,
    pub rho_max: f64,
}

impl Default for OpfOptions {
    fn default() -> OpfOptions {
        OpfOptions {
            grad_tol: 1e-9,
            feas_tol: 1e-8,
            max_inner: 200,
            rho_init: 1e2,
            rho_max: 1e12,
        }
    }
}

/// A dispatch: solved voltages plus per-generator setpoints.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub state: VoltageState,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
}

/// Unknown layout: vre_i at 2i, vim_i at 2i+1, then pg block, then qg block.
struct OpfProblem<'a> {
    net: &'a Network,
    topo: &'a Topology,
    y: &'a AdmittanceMatrix,
    stamps: Vec<BranchStamp>,
    limits: &'a EffectiveLimits,
    load_p: Vec<f64>,
    load_q: Vec<f64>,
    f_scale: f64,
}

struct Assembled {
    r: Vec<f64>,
    j: Option<Csr>,
    h_inf: f64,
    g_inf: f64,
}

impl<'a> OpfProblem<'a> {
    fn new(
        net: &'a Network,
        topo: &'a Topology,
        y: &'a AdmittanceMatrix,
        limits: &'a EffectiveLimits,
    ) -> OpfProblem<'a> {
        let n = net.n_bus();
        let mut load_p = vec![0.0; n];
        let mut load_q = vec![0.0; n];
        for load in &net.loads {
            let pos = topo.bus_pos[&load.bus];
            load_p[pos] += load.p_nom;
            load_q[pos] += load.q_nom;
        }
        OpfProblem {
            net,
            topo,
            y,
            stamps: branch_stamps(net, topo),
            limits,
            load_p,
            load_q,
            f_scale: 1.0,
        }
    }

    fn n_bus(&self) -> usize {
        self.net.n_bus()
    }

    fn n_gen(&self) -> usize {
        self.net.generators.len()
    }

    fn n_vars(&self) -> usize {
        2 * self.n_bus() + 2 * self.n_gen()
    }

    fn col_pg(&self, g: usize) -> usize {
        2 * self.n_bus() + g
    }

    fn col_qg(&self, g: usize) -> usize {
        2 * self.n_bus() + self.n_gen() + g
    }

    fn state_of(&self, x: &[f64]) -> VoltageState {
        let n = self.n_bus();
        VoltageState {
            re: (0..n).map(|i| x[2 * i]).collect(),
            im: (0..n).map(|i| x[2 * i + 1]).collect(),
        }
    }

    fn cost_of(&self, x: &[f64]) -> f64 {
        let base = self.net.base_mva;
        self.net
            .generators
            .iter()
            .enumerate()
            .map(|(g, gen)| poly(&gen.cost, x[self.col_pg(g)] * base))
            .sum()
    }

    fn add_cost_gradient(&self, x: &[f64], grad: &mut [f64]) {
        let base = self.net.base_mva;
        for (g, gen) in self.net.generators.iter().enumerate() {
            grad[self.col_pg(g)] +=
                base * poly_d1(&gen.cost, x[self.col_pg(g)] * base) / self.f_scale;
        }
    }

    /// Positive-semidefinite cost curvature added onto the normal matrix
    /// diagonal (negative curvature from odd cost polynomials is clamped).
    fn add_cost_curvature(&self, x: &[f64], h: &mut Csr) {
        let base = self.net.base_mva;
        for (g, gen) in self.net.generators.iter().enumerate() {
            let col = self.col_pg(g);
            let curv =
                (base * base * poly_d2(&gen.cost, x[col] * base) / self.f_scale).max(0.0);
            if curv > 0.0 {
                add_to_diagonal(h, col, curv);
            }
        }
    }

    /// Residual of the penalty least-squares problem and optionally its
    /// Jacobian. Equality rows carry sqrt(rho); violated inequality rows
    /// likewise (satisfied ones contribute nothing, which keeps the merit
    /// continuously differentiable).
    fn assemble(&self, x: &[f64], rho: f64, want_j: bool) -> Assembled {
        let n = self.n_bus();
        let st = self.state_of(x);
        let (ire, iim) = pf::injected_currents(self.y, &st);
        let w = rho.sqrt();
        let row_bound = 4 * n + 1 + 4 * self.n_gen() + self.stamps.len();
        let mut r = Vec::with_capacity(row_bound);
        let mut t = want_j.then(|| Triplets::new(row_bound, self.n_vars()));
        let mut h_inf: f64 = 0.0;
        let mut g_inf: f64 = 0.0;

        let mut push_row = |r: &mut Vec<f64>, value: f64, entries: &[(usize, f64)]| {
            let row = r.len();
            r.push(w * value);
            if let Some(t) = t.as_mut() {
                for &(col, dv) in entries {
                    t.push(row, col, w * dv);
                }
            }
        };

        // power balance: injections plus load minus local generation
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(24);
        for i in 0..n {
            let (cols, gv) = self.y.g.row(i);
            let (_, bv) = self.y.b.row(i);

            let p = st.re[i] * ire[i] + st.im[i] * iim[i];
            let mut hp = p + self.load_p[i];
            entries.clear();
            for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                entries.push((2 * j, st.re[i] * gij + st.im[i] * bij));
                entries.push((2 * j + 1, -st.re[i] * bij + st.im[i] * gij));
            }
            entries.push((2 * i, ire[i]));
            entries.push((2 * i + 1, iim[i]));
            for &g in &self.topo.gens_at[i] {
                hp -= x[self.col_pg(g)];
                entries.push((self.col_pg(g), -1.0));
            }
            h_inf = h_inf.max(hp.abs());
            push_row(&mut r, hp, &entries);

            let q = st.im[i] * ire[i] - st.re[i] * iim[i];
            let mut hq = q + self.load_q[i];
            entries.clear();
            for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                entries.push((2 * j, st.im[i] * gij - st.re[i] * bij));
                entries.push((2 * j + 1, -st.im[i] * bij - st.re[i] * gij));
            }
            entries.push((2 * i, -iim[i]));
            entries.push((2 * i + 1, ire[i]));
            for &g in &self.topo.gens_at[i] {
                hq -= x[self.col_qg(g)];
                entries.push((self.col_qg(g), -1.0));
            }
            h_inf = h_inf.max(hq.abs());
            push_row(&mut r, hq, &entries);
        }

        // reference angle
        let slack = self.topo.slack;
        h_inf = h_inf.max(st.im[slack].abs());
        push_row(&mut r, st.im[slack], &[(2 * slack + 1, 1.0)]);

        // voltage band, squared magnitudes
        for i in 0..n {
            let vsq = st.re[i] * st.re[i] + st.im[i] * st.im[i];
            let upper = vsq - self.limits.v_max[i] * self.limits.v_max[i];
            g_inf = g_inf.max(upper);
            if upper > 0.0 {
                push_row(
                    &mut r,
                    upper,
                    &[(2 * i, 2.0 * st.re[i]), (2 * i + 1, 2.0 * st.im[i])],
                );
            }
            let lower = self.limits.v_min[i] * self.limits.v_min[i] - vsq;
            g_inf = g_inf.max(lower);
            if lower > 0.0 {
                push_row(
                    &mut r,
                    lower,
                    &[(2 * i, -2.0 * st.re[i]), (2 * i + 1, -2.0 * st.im[i])],
                );
            }
        }

        // generator boxes
        for g in 0..self.n_gen() {
            for (col, lo, hi) in [
                (self.col_pg(g), self.limits.p_min[g], self.limits.p_max[g]),
                (self.col_qg(g), self.limits.q_min[g], self.limits.q_max[g]),
            ] {
                let upper = x[col] - hi;
                g_inf = g_inf.max(upper);
                if upper > 0.0 {
                    push_row(&mut r, upper, &[(col, 1.0)]);
                }
                let lower = lo - x[col];
                g_inf = g_inf.max(lower);
                if lower > 0.0 {
                    push_row(&mut r, lower, &[(col, -1.0)]);
                }
            }
        }

        // from-side apparent flow squared against the rating squared
        for (b, stamp) in self.stamps.iter().enumerate() {
            let s_max = self.limits.s_max[b];
            if !(s_max > 0.0) {
                continue;
            }
            let (fi, ti) = (stamp.from, stamp.to);
            let (a, bb) = (st.re[fi], st.im[fi]);
            let (c, d) = (st.re[ti], st.im[ti]);
            let (g1, b1) = (stamp.yff.re, stamp.yff.im);
            let (g2, b2) = (stamp.yft.re, stamp.yft.im);
            let e = g1 * a - b1 * bb + g2 * c - b2 * d;
            let f = b1 * a + g1 * bb + b2 * c + g2 * d;
            let p = a * e + bb * f;
            let q = bb * e - a * f;
            let cons = p * p + q * q - s_max * s_max;
            g_inf = g_inf.max(cons);
            if cons > 0.0 {
                let dpda = e + a * g1 + bb * b1;
                let dpdb = f - a * b1 + bb * g1;
                let dpdc = a * g2 + bb * b2;
                let dpdd = -a * b2 + bb * g2;
                let dqda = bb * g1 - f - a * b1;
                let dqdb = e - bb * b1 - a * g1;
                let dqdc = bb * g2 - a * b2;
                let dqdd = -bb * b2 - a * g2;
                push_row(
                    &mut r,
                    cons,
                    &[
                        (2 * fi, 2.0 * (p * dpda + q * dqda)),
                        (2 * fi + 1, 2.0 * (p * dpdb + q * dqdb)),
                        (2 * ti, 2.0 * (p * dpdc + q * dqdc)),
                        (2 * ti + 1, 2.0 * (p * dpdd + q * dqdd)),
                    ],
                );
            }
        }

        let j = t.map(|mut t| {
            t.n_rows = r.len();
            t.to_csr()
        });
        Assembled { r, j, h_inf, g_inf }
    }

    fn merit(&self, x: &[f64], rho: f64) -> f64 {
        let a = self.assemble(x, rho, false);
        0.5 * linalg::norm2_sq(&a.r) + self.cost_of(x) / self.f_scale
    }
}

fn add_to_diagonal(m: &mut Csr, i: usize, v: f64) {
    let (cols, _) = m.row(i);
    let k = cols
        .binary_search(&i)
        .expect("normal matrix keeps a full diagonal");
    let start = m.row_ptr[i];
    m.values[start + k] += v;
}

/// Reference dispatch engine: quadratic-penalty Levenberg-Marquardt over
/// [voltages, generator p, generator q], then an exact power flow restore at
/// the optimized voltage magnitudes and non-slack injections.
pub fn deterministic_opf(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    limits: &EffectiveLimits,
    opts: OpfOptions,
) -> Result<OperatingPoint> {
    limits.check_open(net)?;
    let mut prob = OpfProblem::new(net, topo, y, limits);
    let n = net.n_bus();
    let ng = net.generators.len();

    let flat = VoltageState::flat(net, topo);
    let mut x = vec![0.0; prob.n_vars()];
    for i in 0..n {
        x[2 * i] = flat.re[i];
        x[2 * i + 1] = flat.im[i];
    }
    for (g, gen) in net.generators.iter().enumerate() {
        x[prob.col_pg(g)] = gen.p_nom.clamp(limits.p_min[g], limits.p_max[g]);
        x[prob.col_qg(g)] = 0.0f64.clamp(limits.q_min[g], limits.q_max[g]);
    }
    prob.f_scale = prob.cost_of(&x).abs().max(1.0);

    let mut rho = opts.rho_init;
    let mut total_iters = 0;
    loop {
        // inner minimization of the fixed-rho merit
        let mut lambda = 1e-6;
        let mut merit = prob.merit(&x, rho);
        let mut flat_steps = 0;
        for _ in 0..opts.max_inner {
            let asm = prob.assemble(&x, rho, true);
            let j = asm.j.expect("jacobian requested");
            let mut grad = vec![0.0; prob.n_vars()];
            j.tmatvec(&asm.r, &mut grad);
            prob.add_cost_gradient(&x, &mut grad);
            if linalg::norm_inf(&grad) <= opts.grad_tol {
                break;
            }
            let rhs: Vec<f64> = grad.iter().map(|v| -v).collect();
            let mut accepted = false;
            for _ in 0..30 {
                let mut h = linalg::normal_matrix(&j, lambda);
                prob.add_cost_curvature(&x, &mut h);
                let step = match linalg::solve_normal(&h, &rhs) {
                    Ok(s) => s,
                    Err(_) => {
                        lambda *= 10.0;
                        continue;
                    }
                };
                let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
                let trial_merit = prob.merit(&trial, rho);
                if trial_merit.is_finite() && trial_merit < merit {
                    if merit - trial_merit < 1e-15 * (1.0 + merit.abs()) {
                        flat_steps += 1;
                    } else {
                        flat_steps = 0;
                    }
                    x = trial;
                    merit = trial_merit;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    total_iters += 1;
                    break;
                }
                lambda *= 10.0;
                if lambda > 1e16 {
                    break;
                }
            }
            if !accepted || flat_steps >= 2 {
                break;
            }
        }

        let asm = prob.assemble(&x, rho, false);
        if asm.h_inf <= opts.feas_tol && asm.g_inf <= opts.feas_tol {
            break;
        }
        rho *= 10.0;
        if rho > opts.rho_max {
            return Err(Error::NonConvergence {
                what: format!(
                    "penalty dispatch (balance {:.2e}, limit excess {:.2e})",
                    asm.h_inf, asm.g_inf
                ),
                iterations: total_iters,
                residual: asm.h_inf.max(asm.g_inf),
            });
        }
    }

    // exact restoration: hold non-slack injections and all voltage magnitude
    // targets, let a plain power flow absorb the leftover penalty error
    let st = prob.state_of(&x);
    let mut pg: Vec<f64> = (0..ng).map(|g| x[prob.col_pg(g)]).collect();
    let mut qg: Vec<f64> = (0..ng).map(|g| x[prob.col_qg(g)]).collect();
    let conditions: Vec<BusCondition> = (0..n)
        .map(|i| {
            if i == topo.slack {
                BusCondition::Slack {
                    v_re: st.magnitude(i),
                    v_im: 0.0,
                }
            } else if !topo.gens_at[i].is_empty() {
                let p_gen: f64 = topo.gens_at[i].iter().map(|&g| pg[g]).sum();
                BusCondition::Pv {
                    p: p_gen - prob.load_p[i],
                    v_sq: st.magnitude(i).powi(2),
                }
            } else {
                BusCondition::Pq {
                    p: -prob.load_p[i],
                    q: -prob.load_q[i],
                }
            }
        })
        .collect();
    let spec = PfSpec { y, conditions };
    let sol = pf::solve_pf(
        &spec,
        &st,
        NewtonOptions {
            tol: 1e-10,
            max_iter: 50,
        },
    )?;

    // fold the restoration correction back into the setpoints, split evenly
    // among the generators on each bus
    for i in 0..n {
        let gens = &topo.gens_at[i];
        if gens.is_empty() {
            continue;
        }
        let cnt = gens.len() as f64;
        let dp = (sol.p[i] + prob.load_p[i] - gens.iter().map(|&g| pg[g]).sum::<f64>()) / cnt;
        let dq = (sol.q[i] + prob.load_q[i] - gens.iter().map(|&g| qg[g]).sum::<f64>()) / cnt;
        for &g in gens {
            pg[g] += dp;
            qg[g] += dq;
        }
    }
    let base = net.base_mva;
    let cost = net
        .generators
        .iter()
        .zip(&pg)
        .map(|(gen, &p)| poly(&gen.cost, p * base))
        .sum();
    Ok(OperatingPoint {
        state: sol.state,
        pg,
        qg,
        cost,
        iterations: total_iters,
    })
}

/// Worst constraint violation of an operating point against a limit set, on
/// the magnitude scale (volts pu, flow pu, power pu).
pub fn max_violation(
    net: &Network,
    topo: &Topology,
    op: &OperatingPoint,
    limits: &EffectiveLimits,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..net.n_bus() {
        let v = op.state.magnitude(i);
        worst = worst.max(v - limits.v_max[i]).max(limits.v_min[i] - v);
    }
    for (b, stamp) in branch_stamps(net, topo).iter().enumerate() {
        if limits.s_max[b] > 0.0 {
            let s = stamp
                .flow_from(op.state.phasor(stamp.from), op.state.phasor(stamp.to))
                .norm();
            worst = worst.max(s - limits.s_max[b]);
        }
    }
    for g in 0..net.generators.len() {
        worst = worst
            .max(op.pg[g] - limits.p_max[g])
            .max(limits.p_min[g] - op.pg[g])
            .max(op.qg[g] - limits.q_max[g])
            .max(limits.q_min[g] - op.qg[g]);
    }
    worst
}

/// The network re-anchored at a dispatch: generator schedules and voltage
/// setpoints taken from the operating point, loads untouched.
pub fn dispatch_network(net: &Network, topo: &Topology, op: &OperatingPoint) -> Network {
    let mut patched = net.clone();
    for (g, gen) in patched.generators.iter_mut().enumerate() {
        gen.p_nom = op.pg[g];
        gen.v_nom = op.state.magnitude(topo.bus_pos[&gen.bus]);
    }
    patched
}

/// Upper and lower sample quantiles of every constrained quantity.
#[derive(Debug, Clone, Serialize)]
pub struct QuantileSet {
    pub v_upper: Vec<f64>,
    pub v_lower: Vec<f64>,
    pub s_upper: Vec<f64>,
    pub p_upper: Vec<f64>,
    pub p_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub q_lower: Vec<f64>,
}

fn quantiles_of(samples: &MonitoredSamples, delta: f64) -> QuantileSet {
    let both = |vals: &Vec<f64>| {
        (
            quantile(vals, delta, QuantileSide::Upper),
            quantile(vals, delta, QuantileSide::Lower),
        )
    };
    let (v_upper, v_lower) = samples.v_mag.iter().map(both).unzip();
    let s_upper = samples
        .s_from
        .iter()
        .map(|vals| quantile(vals, delta, QuantileSide::Upper))
        .collect();
    let (p_upper, p_lower) = samples.gen_p.iter().map(both).unzip();
    let (q_upper, q_lower) = samples.gen_q.iter().map(both).unzip();
    QuantileSet {
        v_upper,
        v_lower,
        s_upper,
        p_upper,
        p_lower,
        q_upper,
        q_lower,
    }
}

/// Fit the expansion at a dispatch and extract delta-quantiles of the
/// monitored quantities from M evaluated draws.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_quantiles(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    model: &UncertaintyModel,
    tensors: &ProductTensors,
    op: &OperatingPoint,
    delta: f64,
    samples: usize,
    seed: u64,
    spice_cfg: &SpiceConfig,
) -> Result<(QuantileSet, SpiceOutcome)> {
    let patched = dispatch_network(net, topo, op);
    let out = spice(&patched, topo, y, model, tensors, spice_cfg)?;
    let batch = SampleBatch::draw(model.family, model.n_dims(), samples, seed);
    let ev = uq::evaluate_pce(&patched, topo, y, model, &out.coefficients, &batch);
    Ok((quantiles_of(&ev, delta), out))
}

/// Largest tightening applied per constraint class.
#[derive(Debug, Clone, Serialize)]
pub struct TightenDeltas {
    pub by_class: BTreeMap<String, f64>,
}

impl TightenDeltas {
    pub fn max_abs(&self) -> f64 {
        self.by_class.values().fold(0.0, |a, &b| a.max(b))
    }
}

/// Move every effective limit inward by the excess of its quantile over the
/// ORIGINAL limit. Upper limits shrink by max(Q - limit, 0); lower limits
/// grow by -min(Q - limit, 0). Limits never relax.
pub fn tighten(
    net: &Network,
    eff: &mut EffectiveLimits,
    q: &QuantileSet,
    originals: &EffectiveLimits,
) -> Result<TightenDeltas> {
    let mut by_class: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |class: &str, d: f64| {
        let e = by_class.entry(class.to_string()).or_insert(0.0);
        *e = e.max(d.abs());
    };
    for i in 0..net.n_bus() {
        let d = (q.v_upper[i] - originals.v_max[i]).max(0.0);
        eff.v_max[i] -= d;
        note("v_max", d);
        let d = (q.v_lower[i] - originals.v_min[i]).min(0.0);
        eff.v_min[i] -= d;
        note("v_min", d);
    }
    for b in 0..net.branches.len() {
        if originals.s_max[b] > 0.0 {
            let d = (q.s_upper[b] - originals.s_max[b]).max(0.0);
            eff.s_max[b] -= d;
            note("s_max", d);
        }
    }
    for g in 0..net.generators.len() {
        let d = (q.p_upper[g] - originals.p_max[g]).max(0.0);
        eff.p_max[g] -= d;
        note("p_max", d);
        let d = (q.p_lower[g] - originals.p_min[g]).min(0.0);
        eff.p_min[g] -= d;
        note("p_min", d);
        let d = (q.q_upper[g] - originals.q_max[g]).max(0.0);
        eff.q_max[g] -= d;
        note("q_max", d);
        let d = (q.q_lower[g] - originals.q_min[g]).min(0.0);
        eff.q_min[g] -= d;
        note("q_min", d);
    }
    eff.check_open(net)?;
    Ok(TightenDeltas { by_class })
}

#[derive(Debug, Clone)]
pub struct CcOpfConfig {
    /// per-constraint violation probability target
    pub delta: f64,
    /// draws per quantile evaluation and for the final validation
    pub samples: usize,
    pub seed: u64,
    pub max_outer: usize,
    /// convergence threshold on the largest tightening increment
    pub tol: f64,
    pub opf: OpfOptions,
    pub spice: SpiceConfig,
}

impl Default for CcOpfConfig {
    fn default() -> CcOpfConfig {
        CcOpfConfig {
            delta: 0.05,
            samples: 10_000,
            seed: 1,
            max_outer: 10,
            tol: 1e-6,
            opf: OpfOptions::default(),
            spice: SpiceConfig::default(),
        }
    }
}

impl CcOpfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::Validation(format!(
                "delta must lie in (0, 0.5), got {}",
                self.delta
            )));
        }
        if self.samples < 100 {
            return Err(Error::Validation(
                "quantile evaluation needs at least 100 samples".into(),
            ));
        }
        if self.max_outer == 0 {
            return Err(Error::Validation("need at least one outer iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub opf_iterations: usize,
    pub max_delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub delta: f64,
    pub samples: u64,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
    /// final quantile excess over the ORIGINAL limits per class
    /// (at convergence no entry exceeds the tolerance)
    pub quantile_margin: BTreeMap<String, f64>,
    pub validation_samples: u64,
    pub validation_failures: u64,
    /// empirical violation rates from the independent Monte-Carlo run
    pub validation_violation: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct CcOpfOutcome {
    pub operating_point: OperatingPoint,
    pub limits: EffectiveLimits,
    pub certificate: Certificate,
}

fn quantile_margins(
    net: &Network,
    q: &QuantileSet,
    originals: &EffectiveLimits,
) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |class: &str, v: f64| {
        let e = m.entry(class.to_string()).or_insert(f64::MIN);
        *e = e.max(v);
    };
    for i in 0..net.n_bus() {
        note("v_max", q.v_upper[i] - originals.v_max[i]);
        note("v_min", originals.v_min[i] - q.v_lower[i]);
    }
    for b in 0..net.branches.len() {
        if originals.s_max[b] > 0.0 {
            note("s_max", q.s_upper[b] - originals.s_max[b]);
        }
    }
    for g in 0..net.generators.len() {
        note("p_max", q.p_upper[g] - originals.p_max[g]);
        note("p_min", originals.p_min[g] - q.p_lower[g]);
        note("q_max", q.q_upper[g] - originals.q_max[g]);
        note("q_min", originals.q_min[g] - q.q_lower[g]);
    }
    m
}

/// Excesses below this do not count as violations; a binding constraint sits
/// exactly on its limit and would otherwise flip on solver-tolerance noise.
const VIOLATION_GRACE: f64 = 1e-7;

fn rate_above(vals: &[f64], limit: f64) -> f64 {
    let cut = limit + VIOLATION_GRACE;
    vals.iter().filter(|&&v| v > cut).count() as f64 / vals.len() as f64
}

fn rate_below(vals: &[f64], limit: f64) -> f64 {
    let cut = limit - VIOLATION_GRACE;
    vals.iter().filter(|&&v| v < cut).count() as f64 / vals.len() as f64
}

/// Worst empirical violation rate per constraint class.
pub fn violation_rates(
    net: &Network,
    samples: &MonitoredSamples,
    originals: &EffectiveLimits,
) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |class: &str, v: f64| {
        let e = m.entry(class.to_string()).or_insert(0.0);
        *e = e.max(v);
    };
    for i in 0..net.n_bus() {
        note("v_max", rate_above(&samples.v_mag[i], originals.v_max[i]));
        note("v_min", rate_below(&samples.v_mag[i], originals.v_min[i]));
    }
    for b in 0..net.branches.len() {
        if originals.s_max[b] > 0.0 {
            note("s_max", rate_above(&samples.s_from[b], originals.s_max[b]));
        }
    }
    for g in 0..net.generators.len() {
        note("p_max", rate_above(&samples.gen_p[g], originals.p_max[g]));
        note("p_min", rate_below(&samples.gen_p[g], originals.p_min[g]));
        note("q_max", rate_above(&samples.gen_q[g], originals.q_max[g]));
        note("q_min", rate_below(&samples.gen_q[g], originals.q_min[g]));
    }
    m
}

/// The outer loop: dispatch, evaluate quantiles, tighten, repeat. After the
/// increments vanish the dispatch is validated with an independent
/// Monte-Carlo run against the original limits.
pub fn solve_cc_opf(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    model: &UncertaintyModel,
    tensors: &ProductTensors,
    cfg: &CcOpfConfig,
) -> Result<CcOpfOutcome> {
    cfg.validate()?;
    let originals = EffectiveLimits::originals(net);
    originals.check_open(net)?;
    let mut eff = originals.clone();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut last: Option<(OperatingPoint, QuantileSet)> = None;
    let mut converged = false;

    for it in 1..=cfg.max_outer {
        let op = deterministic_opf(net, topo, y, &eff, cfg.opf)?;
        let seed = cfg.seed.wrapping_add(10_007 * it as u64);
        let (q, _) = evaluate_quantiles(
            net, topo, y, model, tensors, &op, cfg.delta, cfg.samples, seed, &cfg.spice,
        )?;
        let deltas = tighten(net, &mut eff, &q, &originals)?;
        log::info!(
            "cc-opf iteration {it}: cost {:.4}, max tightening {:.3e}",
            op.cost,
            deltas.max_abs()
        );
        iterations.push(IterationRecord {
            iteration: it,
            cost: op.cost,
            opf_iterations: op.iterations,
            max_delta: deltas.by_class.clone(),
        });
        let done = deltas.max_abs() <= cfg.tol;
        last = Some((op, q));
        if done {
            converged = true;
            break;
        }
    }
    let (op, q) = last.expect("at least one iteration ran");
    if !converged {
        let residual = iterations.last().map(|r| {
            r.max_delta.values().fold(0.0f64, |a, &b| a.max(b))
        });
        return Err(Error::NonConvergence {
            what: "chance-constraint tightening".into(),
            iterations: cfg.max_outer,
            residual: residual.unwrap_or(f64::NAN),
        });
    }

    // independent validation: true power flows at the final dispatch
    let patched = dispatch_network(net, topo, &op);
    let vseed = cfg.seed.wrapping_add(999_983);
    let mc = uq::run_monte_carlo(
        &patched,
        topo,
        y,
        model,
        cfg.samples,
        vseed,
        NewtonOptions::default(),
    )?;
    let certificate = Certificate {
        delta: cfg.delta,
        samples: cfg.samples as u64,
        converged,
        iterations,
        quantile_margin: quantile_margins(net, &q, &originals),
        validation_samples: mc.n_samples as u64,
        validation_failures: mc.failures as u64,
        validation_violation: violation_rates(net, &mc, &originals),
    };
    Ok(CcOpfOutcome {
        operating_point: op,
        limits: eff,
        certificate,
    })
}
