//! Uncertainty quantification over the network quantities of interest.
//!
//! Two routes produce per-sample values of the monitored quantities
//! (voltage magnitudes, from-side apparent flows, squared series currents,
//! per-generator p and q): full Monte-Carlo power flow solves, and cheap
//! evaluation of a fitted coefficient expansion. Histograms on a shared
//! binning make the two comparable through total-variation distance, and
//! the expansion also yields closed-form moments of V^2 and i^2.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::ProductTensors;
use crate::net::{branch_stamps, AdmittanceMatrix, BranchStamp, Network, Topology};
use crate::pf::{self, NewtonOptions, PfSpec, VoltageState};
use crate::spice::PceCoefficients;
use crate::stochastic::{SampleBatch, UncertaintyModel};
use crate::{Error, Result};

/// Fraction of failed Monte-Carlo power flows tolerated before aborting.
const MC_FAILURE_LIMIT: f64 = 0.01;
/// Histogram bins are this fraction of each quantity's typical scale.
const BIN_FRACTION: f64 = 5e-3;

/// Per-sample values for every monitored quantity, element-major:
/// `v_mag[bus][sample]` and so on.
#[derive(Debug, Clone)]
pub struct MonitoredSamples {
    pub n_samples: usize,
    pub failures: usize,
    pub v_mag: Vec<Vec<f64>>,
    pub s_from: Vec<Vec<f64>>,
    pub i_sq: Vec<Vec<f64>>,
    pub gen_p: Vec<Vec<f64>>,
    pub gen_q: Vec<Vec<f64>>,
}

/// One sample's worth of monitored values.
struct Frame {
    v_mag: Vec<f64>,
    s_from: Vec<f64>,
    i_sq: Vec<f64>,
    gen_p: Vec<f64>,
    gen_q: Vec<f64>,
}

/// Shared extraction of monitored quantities from a solved voltage state
/// plus the per-bus load at that sample. Generator output is reconstructed
/// as realized bus injection plus local load, split evenly across the
/// generators on the bus, which keeps both evaluation routes on the same
/// code path.
struct Extractor<'a> {
    net: &'a Network,
    topo: &'a Topology,
    y: &'a AdmittanceMatrix,
    stamps: Vec<BranchStamp>,
}

impl<'a> Extractor<'a> {
    fn new(net: &'a Network, topo: &'a Topology, y: &'a AdmittanceMatrix) -> Extractor<'a> {
        Extractor {
            net,
            topo,
            y,
            stamps: branch_stamps(net, topo),
        }
    }

    fn extract(&self, st: &VoltageState, load_p: &[f64], load_q: &[f64]) -> Frame {
        let n = self.net.n_bus();
        let v_mag: Vec<f64> = (0..n).map(|i| st.magnitude(i)).collect();
        let mut s_from = Vec::with_capacity(self.stamps.len());
        let mut i_sq = Vec::with_capacity(self.stamps.len());
        for stamp in &self.stamps {
            let vf = st.phasor(stamp.from);
            let vt = st.phasor(stamp.to);
            s_from.push(stamp.flow_from(vf, vt).norm());
            i_sq.push(stamp.current_sq(vf, vt));
        }
        let (bus_p, bus_q) = pf::bus_power(self.y, st);
        let mut gen_p = Vec::with_capacity(self.net.generators.len());
        let mut gen_q = Vec::with_capacity(self.net.generators.len());
        for gen in &self.net.generators {
            let i = self.topo.bus_pos[&gen.bus];
            let share = self.topo.gens_at[i].len() as f64;
            gen_p.push((bus_p[i] + load_p[i]) / share);
            gen_q.push((bus_q[i] + load_q[i]) / share);
        }
        Frame {
            v_mag,
            s_from,
            i_sq,
            gen_p,
            gen_q,
        }
    }
}

fn bus_loads(net: &Network, topo: &Topology, load_p: &[f64], load_q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = net.n_bus();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for (l, load) in net.loads.iter().enumerate() {
        let pos = topo.bus_pos[&load.bus];
        p[pos] += load_p[l];
        q[pos] += load_q[l];
    }
    (p, q)
}

fn collect_frames(
    net: &Network,
    frames: Vec<Frame>,
    failures: usize,
) -> MonitoredSamples {
    let m = frames.len();
    let n_branch = net.branches.len();
    let n_gen = net.generators.len();
    let mut out = MonitoredSamples {
        n_samples: m,
        failures,
        v_mag: vec![Vec::with_capacity(m); net.n_bus()],
        s_from: vec![Vec::with_capacity(m); n_branch],
        i_sq: vec![Vec::with_capacity(m); n_branch],
        gen_p: vec![Vec::with_capacity(m); n_gen],
        gen_q: vec![Vec::with_capacity(m); n_gen],
    };
    for f in frames {
        for (dst, v) in out.v_mag.iter_mut().zip(f.v_mag) {
            dst.push(v);
        }
        for (dst, v) in out.s_from.iter_mut().zip(f.s_from) {
            dst.push(v);
        }
        for (dst, v) in out.i_sq.iter_mut().zip(f.i_sq) {
            dst.push(v);
        }
        for (dst, v) in out.gen_p.iter_mut().zip(f.gen_p) {
            dst.push(v);
        }
        for (dst, v) in out.gen_q.iter_mut().zip(f.gen_q) {
            dst.push(v);
        }
    }
    out
}

/// Monte-Carlo reference: draw M outcomes, solve each power flow warm-started
/// from the nominal solution, and record the monitored quantities. Failed
/// solves are dropped; more than 1% of them aborts the run.
pub fn run_monte_carlo(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    model: &UncertaintyModel,
    m: usize,
    seed: u64,
    opts: NewtonOptions,
) -> Result<MonitoredSamples> {
    if m == 0 {
        return Err(Error::Validation("need at least one sample".into()));
    }
    let nominal = model.inject(net, topo, &vec![0.0; model.n_dims()]);
    let spec = PfSpec::with_injections(net, topo, y, &nominal.bus_p, &nominal.bus_q);
    let warm = pf::solve_pf(&spec, &VoltageState::flat(net, topo), opts)?.state;

    let batch = SampleBatch::draw(model.family, model.n_dims(), m, seed);
    let extractor = Extractor::new(net, topo, y);
    let results: Vec<Option<Frame>> = (0..m)
        .into_par_iter()
        .map(|s| {
            let r = model.inject(net, topo, batch.row(s));
            let spec = PfSpec::with_injections(net, topo, y, &r.bus_p, &r.bus_q);
            match pf::solve_pf(&spec, &warm, opts) {
                Ok(sol) => {
                    let (lp, lq) = bus_loads(net, topo, &r.load_p, &r.load_q);
                    Some(extractor.extract(&sol.state, &lp, &lq))
                }
                Err(_) => None,
            }
        })
        .collect();

    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures as f64 > MC_FAILURE_LIMIT * m as f64 {
        return Err(Error::NonConvergence {
            what: format!("monte carlo ({failures} of {m} power flows failed)"),
            iterations: failures,
            residual: failures as f64 / m as f64,
        });
    }
    Ok(collect_frames(
        net,
        results.into_iter().flatten().collect(),
        failures,
    ))
}

/// Indices of the nonzero coefficients per variable, so evaluation skips the
/// masked and structurally zero entries.
fn support(data: &[f64], n: usize, bus: usize, kk: usize) -> Vec<(u32, f64)> {
    (0..kk)
        .filter_map(|k| {
            let v = data[k * n + bus];
            (v != 0.0).then_some((k as u32, v))
        })
        .collect()
}

/// Evaluate the voltage expansion at one point given the basis values psi.
/// Iterates only nonzero coefficients.
pub fn eval_voltages(coeffs: &PceCoefficients, psi: &[f64]) -> VoltageState {
    let n = coeffs.n_bus;
    let kk = coeffs.k();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for (k, v) in support(&coeffs.vre, n, i, kk) {
            acc += v * psi[k as usize];
        }
        re[i] = acc;
        let mut acc = 0.0;
        for (k, v) in support(&coeffs.vim, n, i, kk) {
            acc += v * psi[k as usize];
        }
        im[i] = acc;
    }
    VoltageState { re, im }
}

/// Evaluate a fitted expansion on a batch of outcomes. The polynomial keeps
/// its own basis family; the batch merely supplies the points, which is what
/// allows evaluating under a mismatched sampling distribution on purpose.
pub fn evaluate_pce(
    net: &Network,
    topo: &Topology,
    y: &AdmittanceMatrix,
    model: &UncertaintyModel,
    coeffs: &PceCoefficients,
    batch: &SampleBatch,
) -> MonitoredSamples {
    let extractor = Extractor::new(net, topo, y);
    let frames: Vec<Frame> = (0..batch.n_samples)
        .into_par_iter()
        .map(|s| {
            let xi = batch.row(s);
            let psi = coeffs.set.eval_basis(coeffs.family, xi);
            let st = eval_voltages(coeffs, &psi);
            let r = model.inject(net, topo, xi);
            let (lp, lq) = bus_loads(net, topo, &r.load_p, &r.load_q);
            extractor.extract(&st, &lp, &lq)
        })
        .collect();
    collect_frames(net, frames, 0)
}

/// Fixed-width histogram anchored at zero: value v lands in bin
/// floor(v / bin_width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub total: u64,
    pub counts: BTreeMap<i64, u64>,
}

pub fn build_histogram(values: &[f64], scale: f64) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Validation("cannot bin an empty sample set".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Validation(format!(
            "histogram scale must be positive, got {scale}"
        )));
    }
    let bin_width = BIN_FRACTION * scale;
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for &v in values {
        *counts.entry((v / bin_width).floor() as i64).or_insert(0) += 1;
    }
    Ok(Histogram {
        bin_width,
        total: values.len() as u64,
        counts,
    })
}

/// Total-variation distance between two histograms on the same binning:
/// half the sum of absolute count differences, normalized by M.
pub fn tv_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    let rel = (a.bin_width - b.bin_width).abs() / a.bin_width.max(b.bin_width);
    if rel > 1e-12 {
        return Err(Error::Validation(format!(
            "histogram bin widths differ: {} vs {}",
            a.bin_width, b.bin_width
        )));
    }
    if a.total != b.total {
        return Err(Error::Validation(format!(
            "histogram totals differ: {} vs {}",
            a.total, b.total
        )));
    }
    let mut sum = 0u64;
    for (bin, &ca) in &a.counts {
        let cb = b.counts.get(bin).copied().unwrap_or(0);
        sum += ca.abs_diff(cb);
    }
    for (bin, &cb) in &b.counts {
        if !a.counts.contains_key(bin) {
            sum += cb;
        }
    }
    Ok(sum as f64 / (2.0 * a.total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileSide {
    Upper,
    Lower,
}

/// Nearest-rank empirical quantile. Upper side: the value Q with
/// P(X <= Q) = 1 - delta; lower side mirrors it from below.
pub fn quantile(values: &[f64], delta: f64, side: QuantileSide) -> f64 {
    assert!(!values.is_empty());
    assert!(delta > 0.0 && delta < 1.0);
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|x, y| x.partial_cmp(y).expect("no NaN in samples"));
    let m = sorted.len();
    let rank = ((1.0 - delta) * m as f64).ceil() as usize;
    let rank = rank.clamp(1, m);
    match side {
        QuantileSide::Upper => sorted[rank - 1],
        QuantileSide::Lower => sorted[m - rank],
    }
}

/// Closed-form moments of squared voltage magnitudes and squared series
/// currents taken directly from the coefficients.
#[derive(Debug, Clone, Serialize)]
pub struct PceMoments {
    pub v_sq_mean: Vec<f64>,
    pub v_sq_var: Vec<f64>,
    pub i_sq_mean: Vec<f64>,
    pub i_sq_var: Vec<f64>,
}

/// Mean and variance of Z = X^2 + Y^2 where X, Y share the orthonormal
/// expansion with coefficients a, b. The mean is the coefficient energy;
/// the second moment needs quadruple products over the joint support.
fn sq_mag_moments(a: &[f64], b: &[f64], tensors: &ProductTensors) -> (f64, f64) {
    let mean: f64 = a.iter().zip(b).map(|(x, y)| x * x + y * y).sum();
    let support: Vec<usize> = (0..a.len())
        .filter(|&k| a[k] != 0.0 || b[k] != 0.0)
        .collect();
    // weighted unordered pairs: coefficient of psi_k1 psi_k2 in Z
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (s1, &k1) in support.iter().enumerate() {
        for &k2 in &support[s1..] {
            let w = if k1 == k2 { 1.0 } else { 2.0 };
            pairs.push((k1, k2, w * (a[k1] * a[k2] + b[k1] * b[k2])));
        }
    }
    let mut second = 0.0;
    for (i, &(k1, k2, c12)) in pairs.iter().enumerate() {
        // diagonal term once, off-diagonal twice
        second += c12 * c12 * tensors.quad(k1, k2, k1, k2);
        for &(k3, k4, c34) in &pairs[i + 1..] {
            let q = tensors.quad(k1, k2, k3, k4);
            if q != 0.0 {
                second += 2.0 * c12 * c34 * q;
            }
        }
    }
    (mean, (second - mean * mean).max(0.0))
}

pub fn pce_moments(
    coeffs: &PceCoefficients,
    tensors: &ProductTensors,
    stamps: &[BranchStamp],
) -> PceMoments {
    assert_eq!(coeffs.set.len(), tensors.set.len());
    let n = coeffs.n_bus;
    let kk = coeffs.k();
    let mut v_sq_mean = Vec::with_capacity(n);
    let mut v_sq_var = Vec::with_capacity(n);
    for i in 0..n {
        let a: Vec<f64> = (0..kk).map(|k| coeffs.vre[k * n + i]).collect();
        let b: Vec<f64> = (0..kk).map(|k| coeffs.vim[k * n + i]).collect();
        let (m, v) = sq_mag_moments(&a, &b, tensors);
        v_sq_mean.push(m);
        v_sq_var.push(v);
    }
    let mut i_sq_mean = Vec::with_capacity(stamps.len());
    let mut i_sq_var = Vec::with_capacity(stamps.len());
    for stamp in stamps {
        let (f, t) = (stamp.from, stamp.to);
        let (g, s) = (stamp.y_series.re, stamp.y_series.im);
        // series current coefficients are affine images of the voltage ones
        let mut a = Vec::with_capacity(kk);
        let mut b = Vec::with_capacity(kk);
        for k in 0..kk {
            let dre = coeffs.vre[k * n + f] - coeffs.vre[k * n + t];
            let dim = coeffs.vim[k * n + f] - coeffs.vim[k * n + t];
            a.push(g * dre - s * dim);
            b.push(g * dim + s * dre);
        }
        let (m, v) = sq_mag_moments(&a, &b, tensors);
        i_sq_mean.push(m);
        i_sq_var.push(v);
    }
    PceMoments {
        v_sq_mean,
        v_sq_var,
        i_sq_mean,
        i_sq_var,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantityReport {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub quantiles: BTreeMap<String, f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UqReport {
    pub n_samples: u64,
    pub failures: u64,
    pub quantities: Vec<QuantityReport>,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = if m > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    (mean, var)
}

fn quantity_report(name: String, values: &[f64], scale: f64, deltas: &[f64]) -> Result<QuantityReport> {
    let (mean, variance) = mean_var(values);
    let mut quantiles = BTreeMap::new();
    for &d in deltas {
        quantiles.insert(
            format!("upper@{d:.4}"),
            quantile(values, d, QuantileSide::Upper),
        );
        quantiles.insert(
            format!("lower@{d:.4}"),
            quantile(values, d, QuantileSide::Lower),
        );
    }
    Ok(QuantityReport {
        name,
        mean,
        variance,
        quantiles,
        histogram: build_histogram(values, scale)?,
    })
}

/// Scale falling back to one when the network leaves a bound open.
fn or_unit(scale: f64) -> f64 {
    if scale > 0.0 {
        scale
    } else {
        1.0
    }
}

/// Full report over all monitored quantities. Bin scales come from the
/// network bounds: voltage band width per bus, flow rating per branch (its
/// square for squared currents), and limit-box width per generator.
pub fn build_report(
    net: &Network,
    samples: &MonitoredSamples,
    deltas: &[f64],
) -> Result<UqReport> {
    let mut quantities = Vec::new();
    for (i, bus) in net.buses.iter().enumerate() {
        quantities.push(quantity_report(
            format!("v_mag[{}]", bus.id),
            &samples.v_mag[i],
            or_unit(bus.v_max - bus.v_min),
            deltas,
        )?);
    }
    for (b, br) in net.branches.iter().enumerate() {
        quantities.push(quantity_report(
            format!("s_from[{}->{}]", br.from_bus, br.to_bus),
            &samples.s_from[b],
            or_unit(br.s_max),
            deltas,
        )?);
    }
    for (b, br) in net.branches.iter().enumerate() {
        quantities.push(quantity_report(
            format!("i_sq[{}->{}]", br.from_bus, br.to_bus),
            &samples.i_sq[b],
            or_unit(br.s_max * br.s_max),
            deltas,
        )?);
    }
    for (g, gen) in net.generators.iter().enumerate() {
        quantities.push(quantity_report(
            format!("gen_p[{}@{}]", g, gen.bus),
            &samples.gen_p[g],
            or_unit(gen.p_max - gen.p_min),
            deltas,
        )?);
    }
    for (g, gen) in net.generators.iter().enumerate() {
        quantities.push(quantity_report(
            format!("gen_q[{}@{}]", g, gen.bus),
            &samples.gen_q[g],
            or_unit(gen.q_max - gen.q_min),
            deltas,
        )?);
    }
    Ok(UqReport {
        n_samples: samples.n_samples as u64,
        failures: samples.failures as u64,
        quantities,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportComparison {
    /// per-quantity total-variation distance, in report order
    pub per_quantity: Vec<(String, f64)>,
    /// average per quantity kind (name prefix before the bracket)
    pub mean_tv: BTreeMap<String, f64>,
}

pub fn compare_reports(a: &UqReport, b: &UqReport) -> Result<ReportComparison> {
    if a.quantities.len() != b.quantities.len() {
        return Err(Error::Validation(
            "reports monitor different quantity sets".into(),
        ));
    }
    let mut per_quantity = Vec::with_capacity(a.quantities.len());
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (qa, qb) in a.quantities.iter().zip(&b.quantities) {
        if qa.name != qb.name {
            return Err(Error::Validation(format!(
                "quantity mismatch: {} vs {}",
                qa.name, qb.name
            )));
        }
        let tv = tv_distance(&qa.histogram, &qb.histogram)?;
        let kind = qa.name.split('[').next().unwrap_or("").to_string();
        let e = sums.entry(kind).or_insert((0.0, 0));
        e.0 += tv;
        e.1 += 1;
        per_quantity.push((qa.name.clone(), tv));
    }
    let mean_tv = sums
        .into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect();
    Ok(ReportComparison {
        per_quantity,
        mean_tv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisFamily, MultiIndexSet};
    use crate::net::{build_admittance, synthetic};
    use crate::spice::{spice, SpiceConfig};
    use proptest::prelude::*;

    fn histogram_from_bins(bins: &[i64], width: f64) -> Histogram {
        let mut counts = BTreeMap::new();
        for &b in bins {
            *counts.entry(b).or_insert(0u64) += 1;
        }
        Histogram {
            bin_width: width,
            total: bins.len() as u64,
            counts,
        }
    }

    #[test]
    fn histogram_examples() {
        let h = build_histogram(&[0.7; 25], 1.0).unwrap();
        assert_eq!(h.counts.len(), 1);
        assert_eq!(h.counts[&((0.7f64 / 0.005).floor() as i64)], 25);

        let h = build_histogram(&[0.1, 0.9], 1.0).unwrap();
        assert_eq!(h.counts[&20], 1);
        assert_eq!(h.counts[&180], 1);

        // shifting by exactly one bin width shifts every key by one
        let vals = [0.0125, 0.0375, 0.0625];
        let h1 = build_histogram(&vals, 1.0).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 0.005).collect();
        let h2 = build_histogram(&shifted, 1.0).unwrap();
        let keys1: Vec<i64> = h1.counts.keys().copied().collect();
        let keys2: Vec<i64> = h2.counts.keys().copied().collect();
        assert_eq!(keys2, keys1.iter().map(|k| k + 1).collect::<Vec<_>>());

        assert!(build_histogram(&[], 1.0).is_err());
        assert!(build_histogram(&[1.0], 0.0).is_err());
    }

    #[test]
    fn tv_examples() {
        let a = histogram_from_bins(&[1, 1, 1, 1, 1, 1, 2, 2, 2, 2], 0.005);
        let b = histogram_from_bins(&[1, 1, 1, 1, 2, 2, 2, 2, 2, 2], 0.005);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert!((tv_distance(&a, &b).unwrap() - 0.2).abs() < 1e-15);

        let c = histogram_from_bins(&[7, 7, 7, 7, 7, 8, 8, 8, 8, 8], 0.005);
        assert_eq!(tv_distance(&a, &c).unwrap(), 1.0);

        let wrong_width = histogram_from_bins(&[1; 10], 0.004);
        assert!(tv_distance(&a, &wrong_width).is_err());
        let wrong_total = histogram_from_bins(&[1; 9], 0.005);
        assert!(tv_distance(&a, &wrong_total).is_err());
    }

    proptest! {
        /// TV is a [0,1]-valued metric for fixed binning.
        #[test]
        fn tv_is_a_metric(
            xs in prop::collection::vec(0i64..12, 40),
            ys in prop::collection::vec(0i64..12, 40),
            zs in prop::collection::vec(0i64..12, 40),
        ) {
            let a = histogram_from_bins(&xs, 0.005);
            let b = histogram_from_bins(&ys, 0.005);
            let c = histogram_from_bins(&zs, 0.005);
            let ab = tv_distance(&a, &b).unwrap();
            let ba = tv_distance(&b, &a).unwrap();
            let ac = tv_distance(&a, &c).unwrap();
            let cb = tv_distance(&c, &b).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(ab <= ac + cb + 1e-15);
        }
    }

    #[test]
    fn quantile_examples() {
        let constant = [3.5; 17];
        assert_eq!(quantile(&constant, 0.05, QuantileSide::Upper), 3.5);
        assert_eq!(quantile(&constant, 0.4, QuantileSide::Lower), 3.5);

        let ladder: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(quantile(&ladder, 0.05, QuantileSide::Upper), 95.0);
        assert_eq!(quantile(&ladder, 0.05, QuantileSide::Lower), 6.0);
        assert_eq!(quantile(&ladder, 0.5, QuantileSide::Upper), 50.0);
    }

    #[test]
    fn quantiles_of_symmetric_samples_are_symmetric() {
        let batch = SampleBatch::draw(BasisFamily::NormalizedUniform, 1, 40_000, 3);
        let vals: Vec<f64> = batch.rows().map(|r| r[0]).collect();
        let up = quantile(&vals, 0.1, QuantileSide::Upper);
        let lo = quantile(&vals, 0.1, QuantileSide::Lower);
        // mean is 0; sampling error at this M stays well inside 0.03
        assert!((up + lo).abs() < 0.03, "upper {up}, lower {lo}");
    }

    fn setup(
        net: &Network,
        n_areas: usize,
        epsilon: f64,
    ) -> (Topology, AdmittanceMatrix, UncertaintyModel) {
        let topo = net.topology();
        let y = build_admittance(net, &topo);
        let model = UncertaintyModel::new(
            net,
            &topo,
            BasisFamily::NormalizedUniform,
            n_areas,
            epsilon,
        )
        .unwrap();
        (topo, y, model)
    }

    #[test]
    fn monte_carlo_is_deterministic_and_collapses_at_zero_epsilon() {
        let net = synthetic::case9();
        let (topo, y, model) = setup(&net, 2, 0.0);
        let a = run_monte_carlo(&net, &topo, &y, &model, 50, 11, NewtonOptions::default())
            .unwrap();
        let b = run_monte_carlo(&net, &topo, &y, &model, 50, 11, NewtonOptions::default())
            .unwrap();
        assert_eq!(a.v_mag, b.v_mag);
        assert_eq!(a.gen_q, b.gen_q);
        // zero spread: every sample hits the deterministic solution
        for bus in &a.v_mag {
            assert!(bus.windows(2).all(|w| w[0] == w[1]));
        }
        assert_eq!(a.failures, 0);
    }

    #[test]
    fn monte_carlo_aborts_when_flows_cannot_converge() {
        let mut net = synthetic::two_bus();
        net.loads[0].p_nom = 20.0;
        let (topo, y, model) = setup(&net, 1, 0.01);
        let err = run_monte_carlo(&net, &topo, &y, &model, 10, 1, NewtonOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn pce_evaluation_spot_values_and_sparse_path() {
        // one bus, one dimension: v_re = 1 + 0.1 * xi
        let set = MultiIndexSet::new(1, 2);
        let kk = set.len();
        let mut coeffs = PceCoefficients {
            family: BasisFamily::NormalizedUniform,
            set: set.clone(),
            n_bus: 1,
            vre: vec![0.0; kk],
            vim: vec![0.0; kk],
            p: vec![0.0; kk],
            q: vec![0.0; kk],
        };
        coeffs.vre[0] = 1.0;
        coeffs.vre[set.position_of(&[1]).unwrap()] = 0.1;
        let psi = set.eval_basis(BasisFamily::NormalizedUniform, &[2.0]);
        let st = eval_voltages(&coeffs, &psi);
        assert!((st.re[0] - 1.2).abs() < 1e-15);

        // dense oracle over every coefficient matches the sparse path
        let batch = SampleBatch::draw(BasisFamily::NormalizedUniform, 1, 64, 5);
        for xi in batch.rows() {
            let psi = set.eval_basis(BasisFamily::NormalizedUniform, xi);
            let sparse = eval_voltages(&coeffs, &psi);
            let dense: f64 = (0..kk).map(|k| coeffs.vre[k] * psi[k]).sum();
            assert!((sparse.re[0] - dense).abs() <= 1e-14);
        }
    }

    #[test]
    fn pce_evaluation_is_affine_in_coefficients() {
        let net = synthetic::case9();
        let (topo, y, model) = setup(&net, 2, 0.03);
        let set = MultiIndexSet::new(2, 2);
        let tensors = ProductTensors::build(BasisFamily::NormalizedUniform, &set);
        let out = spice(&net, &topo, &y, &model, &tensors, &SpiceConfig::default()).unwrap();
        let mut doubled = out.coefficients.clone();
        for v in doubled.vre.iter_mut().chain(doubled.vim.iter_mut()) {
            *v *= 2.0;
        }
        let batch = SampleBatch::draw(BasisFamily::NormalizedUniform, 2, 16, 9);
        for xi in batch.rows() {
            let psi = set.eval_basis(BasisFamily::NormalizedUniform, xi);
            let one = eval_voltages(&out.coefficients, &psi);
            let two = eval_voltages(&doubled, &psi);
            for i in 0..net.n_bus() {
                assert!((one.re[i] + one.re[i] - two.re[i]).abs() <= 1e-12);
                assert!((one.im[i] + one.im[i] - two.im[i]).abs() <= 1e-12);
            }
        }
    }

    /// Cross-method agreement: Monte-Carlo sample mean against the
    /// evaluated expansion's sample mean on an independent batch.
    #[test]
    fn monte_carlo_and_expansion_agree_on_the_mean() {
        let net = synthetic::two_bus();
        let (topo, y, model) = setup(&net, 1, 0.01);
        let m = 10_000;
        let mc = run_monte_carlo(&net, &topo, &y, &model, m, 21, NewtonOptions::default())
            .unwrap();
        let set = MultiIndexSet::new(1, 2);
        let tensors = ProductTensors::build(BasisFamily::NormalizedUniform, &set);
        let out = spice(&net, &topo, &y, &model, &tensors, &SpiceConfig::default()).unwrap();
        let batch = SampleBatch::draw(BasisFamily::NormalizedUniform, 1, m, 22);
        let ev = evaluate_pce(&net, &topo, &y, &model, &out.coefficients, &batch);

        let (mc_mean, mc_var) = mean_var(&mc.v_mag[1]);
        let (ev_mean, _) = mean_var(&ev.v_mag[1]);
        let se = (mc_var / m as f64).sqrt();
        assert!(
            (mc_mean - ev_mean).abs() <= 4.0 * se,
            "mc {mc_mean} vs pce {ev_mean}, se {se}"
        );
    }

    #[test]
    fn analytic_moments_match_sampling() {
        let net = synthetic::case9();
        let (topo, y, model) = setup(&net, 2, 0.03);
        let set = MultiIndexSet::new(2, 2);
        let tensors = ProductTensors::build(BasisFamily::NormalizedUniform, &set);
        let out = spice(&net, &topo, &y, &model, &tensors, &SpiceConfig::default()).unwrap();
        let stamps = branch_stamps(&net, &topo);
        let moments = pce_moments(&out.coefficients, &tensors, &stamps);

        let m = 20_000;
        let batch = SampleBatch::draw(BasisFamily::NormalizedUniform, 2, m, 33);
        let ev = evaluate_pce(&net, &topo, &y, &model, &out.coefficients, &batch);
        for i in 0..net.n_bus() {
            let v2: Vec<f64> = ev.v_mag[i].iter().map(|v| v * v).collect();
            let (mean, var) = mean_var(&v2);
            let se = (var / m as f64).sqrt();
            assert!(
                (moments.v_sq_mean[i] - mean).abs() <= 4.0 * se.max(1e-12),
                "bus {i}: analytic {} vs sampled {mean}",
                moments.v_sq_mean[i]
            );
            assert!(moments.v_sq_var[i] >= 0.0);
        }
        for b in 0..net.branches.len() {
            let (mean, var) = mean_var(&ev.i_sq[b]);
            let se = (var / m as f64).sqrt();
            assert!(
                (moments.i_sq_mean[b] - mean).abs() <= 4.0 * se.max(1e-12),
                "branch {b}: analytic {} vs sampled {mean}",
                moments.i_sq_mean[b]
            );
        }

        // zero spread: moments collapse to the squared mean state
        let (_, _, model0) = setup(&net, 2, 0.0);
        let out0 = spice(&net, &topo, &y, &model0, &tensors, &SpiceConfig::default()).unwrap();
        let m0 = pce_moments(&out0.coefficients, &tensors, &stamps);
        for i in 0..net.n_bus() {
            let expect = out0.coefficients.vre[i].powi(2) + out0.coefficients.vim[i].powi(2);
            assert!((m0.v_sq_mean[i] - expect).abs() <= 1e-12);
            assert!(m0.v_sq_var[i].abs() <= 1e-12);
        }
    }

    #[test]
    fn independent_runs_have_small_nonzero_tv() {
        let net = synthetic::two_bus();
        let (topo, y, model) = setup(&net, 1, 0.02);
        let m = 2000;
        let a = run_monte_carlo(&net, &topo, &y, &model, m, 1, NewtonOptions::default()).unwrap();
        let b = run_monte_carlo(&net, &topo, &y, &model, m, 2, NewtonOptions::default()).unwrap();
        let ha = build_histogram(&a.v_mag[1], 0.2).unwrap();
        let hb = build_histogram(&b.v_mag[1], 0.2).unwrap();
        let tv = tv_distance(&ha, &hb).unwrap();
        assert!(tv > 0.0);
        // degenerate single-bin reference is much farther away
        let degenerate = build_histogram(&vec![0.0; m], 0.2).unwrap();
        assert!(tv < tv_distance(&ha, &degenerate).unwrap());
    }

    #[test]
    fn reports_round_trip_and_compare() {
        let net = synthetic::case9();
        let (topo, y, model) = setup(&net, 2, 0.02);
        let mc = run_monte_carlo(&net, &topo, &y, &model, 500, 77, NewtonOptions::default())
            .unwrap();
        let report = build_report(&net, &mc, &[0.05]).unwrap();
        assert_eq!(
            report.quantities.len(),
            net.n_bus() + 2 * net.branches.len() + 2 * net.generators.len()
        );
        for q in &report.quantities {
            assert!(q.variance >= 0.0);
            assert_eq!(
                q.histogram.counts.values().sum::<u64>(),
                q.histogram.total
            );
        }
        let json = serde_json::to_string(&report).unwrap();
        let back: UqReport = serde_json::from_str(&json).unwrap();
        let cmp = compare_reports(&report, &back).unwrap();
        assert!(cmp.per_quantity.iter().all(|(_, tv)| *tv == 0.0));
        assert!(cmp.mean_tv.contains_key("v_mag"));
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}
