//! Deterministic AC power flow in rectangular voltage coordinates.
//!
//! With V_i = vre_i + j vim_i and Y = G + jB, the bus injections are
//!     p_i = vre_i ire_i + vim_i iim_i
//!     q_i = vim_i ire_i - vre_i iim_i
//! where ire_i + j iim_i = sum_j Y_ij V_j is the injected current. Both
//! residual and Jacobian are quadratic/linear in the rectangular voltages,
//! which is what lets the chaos-expansion machinery reuse this formulation
//! with exact Galerkin projections.
//!
//! Bus conditions: PQ fixes (p, q), PV fixes (p, |V|^2) so the system stays
//! polynomial, the slack fixes its voltage phasor outright.

use num_complex::Complex64;

use crate::linalg::{lu_solve, norm_inf, Triplets};
use crate::net::{AdmittanceMatrix, BusKind, Network, Topology};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageState {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl VoltageState {
    /// Flat start: setpoint magnitude at generator buses, nominal magnitude
    /// elsewhere, all angles zero.
    pub fn flat(net: &Network, topo: &Topology) -> VoltageState {
        let re = net
            .buses
            .iter()
            .enumerate()
            .map(|(i, bus)| match bus.kind {
                BusKind::Slack | BusKind::Pv => setpoint_magnitude(net, topo, i),
                BusKind::Pq => bus.nominal_v,
            })
            .collect();
        VoltageState {
            re,
            im: vec![0.0; net.n_bus()],
        }
    }

    pub fn n(&self) -> usize {
        self.re.len()
    }

    pub fn phasor(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.phasor(i).norm()
    }
}

/// Voltage magnitude setpoint at a bus: the first attached generator's
/// setpoint, falling back to the bus nominal magnitude.
pub fn setpoint_magnitude(net: &Network, topo: &Topology, bus_pos: usize) -> f64 {
    topo.gens_at[bus_pos]
        .first()
        .map(|&g| net.generators[g].v_nom)
        .unwrap_or(net.buses[bus_pos].nominal_v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusCondition {
    Slack { v_re: f64, v_im: f64 },
    Pv { p: f64, v_sq: f64 },
    Pq { p: f64, q: f64 },
}

/// A concrete power flow problem: admittance plus one condition per bus.
#[derive(Debug, Clone)]
pub struct PfSpec<'a> {
    pub y: &'a AdmittanceMatrix,
    pub conditions: Vec<BusCondition>,
}

/// Net scheduled injections per bus position (generation minus load).
pub fn nominal_injections(net: &Network, topo: &Topology) -> (Vec<f64>, Vec<f64>) {
    let n = net.n_bus();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for (i, _) in net.buses.iter().enumerate() {
        for &g in &topo.gens_at[i] {
            p[i] += net.generators[g].p_nom;
        }
        for &l in &topo.loads_at[i] {
            p[i] -= net.loads[l].p_nom;
            q[i] -= net.loads[l].q_nom;
        }
    }
    (p, q)
}

impl<'a> PfSpec<'a> {
    pub fn with_injections(
        net: &Network,
        topo: &Topology,
        y: &'a AdmittanceMatrix,
        bus_p: &[f64],
        bus_q: &[f64],
    ) -> PfSpec<'a> {
        let conditions = net
            .buses
            .iter()
            .enumerate()
            .map(|(i, bus)| match bus.kind {
                BusKind::Slack => BusCondition::Slack {
                    v_re: setpoint_magnitude(net, topo, i),
                    v_im: 0.0,
                },
                BusKind::Pv => BusCondition::Pv {
                    p: bus_p[i],
                    v_sq: setpoint_magnitude(net, topo, i).powi(2),
                },
                BusKind::Pq => BusCondition::Pq {
                    p: bus_p[i],
                    q: bus_q[i],
                },
            })
            .collect();
        PfSpec { y, conditions }
    }

    pub fn nominal(net: &Network, topo: &Topology, y: &'a AdmittanceMatrix) -> PfSpec<'a> {
        let (p, q) = nominal_injections(net, topo);
        PfSpec::with_injections(net, topo, y, &p, &q)
    }

    pub fn n_bus(&self) -> usize {
        self.conditions.len()
    }

    /// Residual vector, two rows per bus: the p-type row and the q-type
    /// (or |V|^2, or fixed-phasor) row.
    pub fn residual(&self, st: &VoltageState) -> Vec<f64> {
        let n = self.n_bus();
        let (ire, iim) = injected_currents(self.y, st);
        let mut r = vec![0.0; 2 * n];
        for i in 0..n {
            match self.conditions[i] {
                BusCondition::Slack { v_re, v_im } => {
                    r[2 * i] = st.re[i] - v_re;
                    r[2 * i + 1] = st.im[i] - v_im;
                }
                BusCondition::Pv { p, v_sq } => {
                    r[2 * i] = st.re[i] * ire[i] + st.im[i] * iim[i] - p;
                    r[2 * i + 1] = st.re[i] * st.re[i] + st.im[i] * st.im[i] - v_sq;
                }
                BusCondition::Pq { p, q } => {
                    r[2 * i] = st.re[i] * ire[i] + st.im[i] * iim[i] - p;
                    r[2 * i + 1] = st.im[i] * ire[i] - st.re[i] * iim[i] - q;
                }
            }
        }
        r
    }

    /// Jacobian of [`Self::residual`] with columns (vre_0, vim_0, vre_1, ...).
    pub fn jacobian(&self, st: &VoltageState) -> Triplets {
        let n = self.n_bus();
        let (ire, iim) = injected_currents(self.y, st);
        let mut t = Triplets::with_capacity(2 * n, 2 * n, 8 * self.y.g.nnz() + 4 * n);
        for i in 0..n {
            match self.conditions[i] {
                BusCondition::Slack { .. } => {
                    t.push(2 * i, 2 * i, 1.0);
                    t.push(2 * i + 1, 2 * i + 1, 1.0);
                }
                BusCondition::Pv { .. } => {
                    self.push_p_row(&mut t, st, &ire, &iim, i);
                    t.push(2 * i + 1, 2 * i, 2.0 * st.re[i]);
                    t.push(2 * i + 1, 2 * i + 1, 2.0 * st.im[i]);
                }
                BusCondition::Pq { .. } => {
                    self.push_p_row(&mut t, st, &ire, &iim, i);
                    // q_i = vim_i ire_i - vre_i iim_i
                    let row = 2 * i + 1;
                    let (cols, gv) = self.y.g.row(i);
                    let (_, bv) = self.y.b.row(i);
                    for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                        t.push(row, 2 * j, st.im[i] * gij - st.re[i] * bij);
                        t.push(row, 2 * j + 1, -st.im[i] * bij - st.re[i] * gij);
                    }
                    t.push(row, 2 * i, -iim[i]);
                    t.push(row, 2 * i + 1, ire[i]);
                }
            }
        }
        t
    }

    fn push_p_row(
        &self,
        t: &mut Triplets,
        st: &VoltageState,
        ire: &[f64],
        iim: &[f64],
        i: usize,
    ) {
        // p_i = vre_i ire_i + vim_i iim_i
        let row = 2 * i;
        let (cols, gv) = self.y.g.row(i);
        let (_, bv) = self.y.b.row(i);
        for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
            t.push(row, 2 * j, st.re[i] * gij + st.im[i] * bij);
            t.push(row, 2 * j + 1, -st.re[i] * bij + st.im[i] * gij);
        }
        t.push(row, 2 * i, ire[i]);
        t.push(row, 2 * i + 1, iim[i]);
    }
}

/// Injected currents ire + j iim = Y V in real arithmetic.
pub fn injected_currents(y: &AdmittanceMatrix, st: &VoltageState) -> (Vec<f64>, Vec<f64>) {
    let n = st.n();
    let mut ire = vec![0.0; n];
    let mut iim = vec![0.0; n];
    for i in 0..n {
        let (cols, gv) = y.g.row(i);
        let (_, bv) = y.b.row(i);
        let mut re = 0.0;
        let mut im = 0.0;
        for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
            re += gij * st.re[j] - bij * st.im[j];
            im += gij * st.im[j] + bij * st.re[j];
        }
        ire[i] = re;
        iim[i] = im;
    }
    (ire, iim)
}

/// Realized bus injections p + jq = diag(V) conj(Y V) at a voltage state.
pub fn bus_power(y: &AdmittanceMatrix, st: &VoltageState) -> (Vec<f64>, Vec<f64>) {
    let (ire, iim) = injected_currents(y, st);
    let n = st.n();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        p[i] = st.re[i] * ire[i] + st.im[i] * iim[i];
        q[i] = st.im[i] * ire[i] - st.re[i] * iim[i];
    }
    (p, q)
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,      // infinity norm on the residual
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    pub state: VoltageState,
    pub iterations: usize,
    pub mismatch: f64,
    /// realized injections at the solution
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Newton's method with a halving damping fallback when a full step would
/// increase the residual norm.
pub fn solve_pf(spec: &PfSpec, start: &VoltageState, opts: NewtonOptions) -> Result<PfSolution> {
    let n = spec.n_bus();
    let mut st = start.clone();
    let mut res = spec.residual(&st);
    let mut norm = norm_inf(&res);

    for iter in 0..opts.max_iter {
        if norm <= opts.tol {
            let (p, q) = bus_power(spec.y, &st);
            return Ok(PfSolution {
                state: st,
                iterations: iter,
                mismatch: norm,
                p,
                q,
            });
        }
        let jac = spec.jacobian(&st);
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        let step = lu_solve(&jac, &rhs)?;

        let mut alpha = 1.0;
        loop {
            let trial = VoltageState {
                re: (0..n).map(|i| st.re[i] + alpha * step[2 * i]).collect(),
                im: (0..n).map(|i| st.im[i] + alpha * step[2 * i + 1]).collect(),
            };
            let trial_res = spec.residual(&trial);
            let trial_norm = norm_inf(&trial_res);
            if trial_norm < norm || alpha < 1.0 / 64.0 {
                let stalled = trial_norm >= norm;
                st = trial;
                res = trial_res;
                norm = trial_norm;
                if stalled {
                    return Err(Error::NonConvergence {
                        what: "power flow (stalled)".into(),
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
        let (p, q) = bus_power(spec.y, &st);
        return Ok(PfSolution {
            state: st,
            iterations: opts.max_iter,
            mismatch: norm,
            p,
            q,
        });
    }
    Err(Error::NonConvergence {
        what: "power flow".into(),
        iterations: opts.max_iter,
        residual: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_admittance, synthetic};
    use approx::assert_relative_eq;
    use rand_core::{RngCore, SeedableRng};

    fn oracle_power(y: &AdmittanceMatrix, st: &VoltageState) -> (Vec<f64>, Vec<f64>) {
        // independent route: S = diag(V) conj(Y V) in complex arithmetic
        let n = st.n();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let (cols, gv) = y.g.row(i);
            let (_, bv) = y.b.row(i);
            let mut current = Complex64::new(0.0, 0.0);
            for ((&j, &gij), &bij) in cols.iter().zip(gv).zip(bv) {
                current += Complex64::new(gij, bij) * st.phasor(j);
            }
            let s = st.phasor(i) * current.conj();
            p[i] = s.re;
            q[i] = s.im;
        }
        (p, q)
    }

    /// Rectangular injections agree with the complex form on 100 random
    /// states to 1e-12.
    #[test]
    fn injections_match_complex_arithmetic() {
        let net = synthetic::case9();
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
        };
        for _ in 0..100 {
            let st = VoltageState {
                re: (0..net.n_bus()).map(|_| 0.9 + 0.2 * unit(&mut rng)).collect(),
                im: (0..net.n_bus()).map(|_| -0.2 + 0.4 * unit(&mut rng)).collect(),
            };
            let (p, q) = bus_power(&y, &st);
            let (po, qo) = oracle_power(&y, &st);
            for i in 0..net.n_bus() {
                assert!((p[i] - po[i]).abs() <= 1e-12);
                assert!((q[i] - qo[i]).abs() <= 1e-12);
            }
        }
    }

    /// Two-bus case solved by an independent fixed-point method
    /// V2 <- V1 + z * conj(S2 / V2).
    #[test]
    fn two_bus_matches_fixed_point_solution() {
        let net = synthetic::two_bus();
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let spec = PfSpec::nominal(&net, &topo, &y);
        let opts = NewtonOptions {
            tol: 1e-13,
            ..NewtonOptions::default()
        };
        let sol = solve_pf(&spec, &VoltageState::flat(&net, &topo), opts).unwrap();

        let z = Complex64::new(0.02, 0.10);
        let s2 = Complex64::new(-0.5, -0.2); // consumption
        let mut v2 = Complex64::new(1.0, 0.0);
        for _ in 0..200 {
            v2 = Complex64::new(1.0, 0.0) + z * (s2 / v2).conj();
        }
        assert_relative_eq!(sol.state.re[1], v2.re, epsilon = 1e-10);
        assert_relative_eq!(sol.state.im[1], v2.im, epsilon = 1e-10);
    }

    #[test]
    fn case9_converges_from_flat_start() {
        let net = synthetic::case9();
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let spec = PfSpec::nominal(&net, &topo, &y);
        let sol = solve_pf(&spec, &VoltageState::flat(&net, &topo), NewtonOptions::default())
            .unwrap();
        assert!(sol.iterations <= 6, "took {} iterations", sol.iterations);
        assert!(sol.mismatch <= 1e-8);
        // PV magnitudes at their setpoints
        assert_relative_eq!(sol.state.magnitude(1), 1.025, epsilon = 1e-8);
        assert_relative_eq!(sol.state.magnitude(2), 1.025, epsilon = 1e-8);
        // slack covers load plus losses
        let total_load: f64 = net.loads.iter().map(|l| l.p_nom).sum();
        let gen_sched: f64 = net.generators[1].p_nom + net.generators[2].p_nom;
        let losses = sol.p.iter().sum::<f64>();
        assert!(losses > 0.0 && losses < 0.1, "losses {losses}");
        assert_relative_eq!(sol.p[0], total_load + losses - gen_sched, epsilon = 1e-8);
        // warm restart should already be converged
        let again = solve_pf(&spec, &sol.state, NewtonOptions::default()).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn synthetic_grids_converge() {
        for n in [30usize, 118] {
            let net = synthetic::ring_grid(n, 1.0, 7);
            let topo = net.topology();
            let y = build_admittance(&net, &topo);
            let spec = PfSpec::nominal(&net, &topo, &y);
            let sol =
                solve_pf(&spec, &VoltageState::flat(&net, &topo), NewtonOptions::default())
                    .unwrap();
            assert!(sol.mismatch <= 1e-8);
            assert!(sol.iterations <= 10);
            for i in 0..net.n_bus() {
                let vm = sol.state.magnitude(i);
                assert!(vm > 0.85 && vm < 1.15, "bus {i} at {vm}");
            }
        }
    }

    #[test]
    fn slack_rows_are_identity() {
        let net = synthetic::case9();
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let spec = PfSpec::nominal(&net, &topo, &y);
        let st = VoltageState::flat(&net, &topo);
        let j = spec.jacobian(&st).to_csr();
        // slack is bus position 0
        let (cols, vals) = j.row(0);
        assert_eq!(cols, &[0]);
        assert_eq!(vals, &[1.0]);
        let (cols, vals) = j.row(1);
        assert_eq!(cols, &[1]);
        assert_eq!(vals, &[1.0]);
    }

    /// Central finite differences against the analytic Jacobian, h = 1e-6.
    #[test]
    fn jacobian_matches_finite_differences() {
        let net = synthetic::ring_grid(30, 1.0, 7);
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let spec = PfSpec::nominal(&net, &topo, &y);
        let mut st = VoltageState::flat(&net, &topo);
        // move off the trivial point
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for i in 0..net.n_bus() {
            st.re[i] += 0.02 * (((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) - 0.5);
            st.im[i] += 0.02 * (((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) - 0.5);
        }
        let jac = spec.jacobian(&st).to_csr();
        let h = 1e-6;
        let n = net.n_bus();
        let mut worst = 0.0f64;
        for col in 0..2 * n {
            let mut plus = st.clone();
            let mut minus = st.clone();
            if col % 2 == 0 {
                plus.re[col / 2] += h;
                minus.re[col / 2] -= h;
            } else {
                plus.im[col / 2] += h;
                minus.im[col / 2] -= h;
            }
            let rp = spec.residual(&plus);
            let rm = spec.residual(&minus);
            for row in 0..2 * n {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let an = jac.get(row, col);
                let denom = an.abs().max(1.0);
                worst = worst.max((fd - an).abs() / denom);
            }
        }
        assert!(worst <= 1e-6, "max relative error {worst}");
    }

    #[test]
    fn unsolvable_load_reports_nonconvergence() {
        let mut net = synthetic::two_bus();
        net.loads[0].p_nom = 20.0; // far past the deliverable power
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let spec = PfSpec::nominal(&net, &topo, &y);
        let err = solve_pf(&spec, &VoltageState::flat(&net, &topo), NewtonOptions::default())
            .unwrap_err();
        match err {
            Error::NonConvergence { residual, .. } => assert!(residual > 1e-3),
            other => panic!("expected non-convergence, got {other}"),
        }
    }
}
