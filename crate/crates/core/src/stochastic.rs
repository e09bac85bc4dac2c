//! Uncertainty model: clustered load randomness with generator recourse.
//!
//! Loads are grouped into geographic areas; all loads in area a scale by the
//! same random factor (1 + eps * xi_a), at constant power factor. The random
//! vector xi has independent components, each either uniform on
//! [-sqrt(3), sqrt(3)] or standard normal, so every component has mean 0 and
//! variance 1 and eps is directly the relative load standard deviation.
//!
//! Generators respond to the aggregate deviation through an equal-share AGC
//! rule: every generator picks up 1/N_gen of the total load change. The
//! resulting net bus injections stay affine in xi, which the expansion
//! machinery relies on.

use rand_core::{RngCore, SeedableRng};

use crate::basis::BasisFamily;
use crate::net::{Network, Topology};
use crate::{Error, Result};

/// Assign every bus to one of `n_areas` contiguous regions, balancing the
/// number of loads per region.
///
/// Recursive bisection: each region is ordered by breadth-first level from an
/// eccentric seed bus (found with a double BFS) and cut where the running
/// load count crosses the proportional target. The prefix of a BFS level
/// order is always connected; the remainder may not be, which is acceptable
/// for grouping purposes.
pub fn partition_areas(net: &Network, topo: &Topology, n_areas: usize) -> Result<Vec<usize>> {
    let n = net.n_bus();
    if n_areas == 0 {
        return Err(Error::Validation("need at least one area".into()));
    }
    if n_areas > net.loads.len() {
        return Err(Error::Validation(format!(
            "cannot split {} loads into {} areas",
            net.loads.len(),
            n_areas
        )));
    }
    let mut loads_per_bus = vec![0usize; n];
    for load in &net.loads {
        loads_per_bus[topo.bus_pos[&load.bus]] += 1;
    }
    let mut area = vec![0usize; n];
    let region: Vec<usize> = (0..n).collect();
    let mut next_area = 0;
    bisect(topo, &loads_per_bus, region, n_areas, &mut next_area, &mut area);
    debug_assert_eq!(next_area, n_areas);
    Ok(area)
}

fn bisect(
    topo: &Topology,
    loads_per_bus: &[usize],
    region: Vec<usize>,
    k: usize,
    next_area: &mut usize,
    area: &mut [usize],
) {
    if k == 1 {
        for &b in &region {
            area[b] = *next_area;
        }
        *next_area += 1;
        return;
    }
    let order = bfs_level_order(topo, &region);
    let total: usize = region.iter().map(|&b| loads_per_bus[b]).sum();
    let k1 = k / 2;
    let target = (total * k1) as f64 / k as f64;

    // cut after the bus where the running load count first reaches the
    // target, keeping at least one bus on each side
    let mut cut = order.len() - 1;
    let mut running = 0usize;
    for (idx, &b) in order.iter().enumerate() {
        running += loads_per_bus[b];
        if running as f64 >= target && idx + 1 < order.len() {
            cut = idx + 1;
            break;
        }
    }
    let first: Vec<usize> = order[..cut].to_vec();
    let second: Vec<usize> = order[cut..].to_vec();
    bisect(topo, loads_per_bus, first, k1, next_area, area);
    bisect(topo, loads_per_bus, second, k - k1, next_area, area);
}

/// Level order from an eccentric bus of the region: BFS from an arbitrary
/// member finds a farthest bus, a second BFS from there defines the levels.
/// Ties break on bus position so the order is deterministic. Region members
/// unreachable inside the region are appended at the end in position order.
fn bfs_level_order(topo: &Topology, region: &[usize]) -> Vec<usize> {
    let in_region: std::collections::HashSet<usize> = region.iter().copied().collect();
    let first = bfs(topo, &in_region, region[0]);
    let seed = *first.last().unwrap_or(&region[0]);
    let mut order = bfs(topo, &in_region, seed);
    if order.len() < region.len() {
        let seen: std::collections::HashSet<usize> = order.iter().copied().collect();
        let mut rest: Vec<usize> = region
            .iter()
            .copied()
            .filter(|b| !seen.contains(b))
            .collect();
        rest.sort_unstable();
        order.extend(rest);
    }
    order
}

fn bfs(
    topo: &Topology,
    in_region: &std::collections::HashSet<usize>,
    seed: usize,
) -> Vec<usize> {
    let mut order = vec![seed];
    let mut seen = std::collections::HashSet::from([seed]);
    let mut frontier = vec![seed];
    while !frontier.is_empty() {
        let mut next: Vec<usize> = Vec::new();
        for &b in &frontier {
            for &(nb, _) in &topo.adjacency[b] {
                if in_region.contains(&nb) && seen.insert(nb) {
                    next.push(nb);
                }
            }
        }
        next.sort_unstable();
        next.dedup();
        order.extend(&next);
        frontier = next;
    }
    order
}

#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    pub family: BasisFamily,
    /// relative standard deviation of each load cluster
    pub epsilon: f64,
    pub n_areas: usize,
    /// area index per load (parallel to `net.loads`)
    pub load_area: Vec<usize>,
}

impl UncertaintyModel {
    pub fn new(
        net: &Network,
        topo: &Topology,
        family: BasisFamily,
        n_areas: usize,
        epsilon: f64,
    ) -> Result<UncertaintyModel> {
        if net.generators.is_empty() {
            return Err(Error::Validation(
                "uncertainty model needs at least one generator for recourse".into(),
            ));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Validation(format!(
                "epsilon must be in [0, 1), got {epsilon}"
            )));
        }
        let bus_area = partition_areas(net, topo, n_areas)?;
        let load_area = net
            .loads
            .iter()
            .map(|l| bus_area[topo.bus_pos[&l.bus]])
            .collect();
        Ok(UncertaintyModel {
            family,
            epsilon,
            n_areas,
            load_area,
        })
    }

    pub fn n_dims(&self) -> usize {
        self.n_areas
    }

    /// Total nominal active load per area.
    pub fn area_load(&self, net: &Network) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_areas];
        for (l, load) in net.loads.iter().enumerate() {
            acc[self.load_area[l]] += load.p_nom;
        }
        acc
    }

    /// Concrete injections for one outcome of xi.
    pub fn inject(&self, net: &Network, topo: &Topology, xi: &[f64]) -> Realization {
        assert_eq!(xi.len(), self.n_areas);
        let n = net.n_bus();
        let n_gen = net.generators.len() as f64;

        let mut load_p = Vec::with_capacity(net.loads.len());
        let mut load_q = Vec::with_capacity(net.loads.len());
        let mut deviation = 0.0;
        for (l, load) in net.loads.iter().enumerate() {
            let scale = 1.0 + self.epsilon * xi[self.load_area[l]];
            load_p.push(load.p_nom * scale);
            load_q.push(load.q_nom * scale);
            deviation += load.p_nom * (scale - 1.0);
        }
        let share = deviation / n_gen;
        let gen_p: Vec<f64> = net.generators.iter().map(|g| g.p_nom + share).collect();

        let mut bus_p = vec![0.0; n];
        let mut bus_q = vec![0.0; n];
        for (g, gen) in net.generators.iter().enumerate() {
            bus_p[topo.bus_pos[&gen.bus]] += gen_p[g];
        }
        for (l, load) in net.loads.iter().enumerate() {
            let pos = topo.bus_pos[&load.bus];
            bus_p[pos] -= load_p[l];
            bus_q[pos] -= load_q[l];
        }
        Realization {
            bus_p,
            bus_q,
            gen_p,
            load_p,
            load_q,
        }
    }

    /// Exact affine expansion of the net bus injections:
    /// bus_p(xi) = p0 + sum_a dp[a] * xi_a, and likewise for q.
    pub fn linear_injections(&self, net: &Network, topo: &Topology) -> InjectionCoeffs {
        let n = net.n_bus();
        let n_gen = net.generators.len() as f64;
        let area_load = self.area_load(net);

        let mut gens_per_bus = vec![0.0; n];
        for gen in &net.generators {
            gens_per_bus[topo.bus_pos[&gen.bus]] += 1.0;
        }

        let mut p0 = vec![0.0; n];
        let mut q0 = vec![0.0; n];
        for gen in &net.generators {
            p0[topo.bus_pos[&gen.bus]] += gen.p_nom;
        }
        for load in &net.loads {
            let pos = topo.bus_pos[&load.bus];
            p0[pos] -= load.p_nom;
            q0[pos] -= load.q_nom;
        }

        let mut dp = vec![vec![0.0; n]; self.n_areas];
        let mut dq = vec![vec![0.0; n]; self.n_areas];
        for a in 0..self.n_areas {
            for i in 0..n {
                dp[a][i] = self.epsilon * gens_per_bus[i] * area_load[a] / n_gen;
            }
        }
        for (l, load) in net.loads.iter().enumerate() {
            let pos = topo.bus_pos[&load.bus];
            let a = self.load_area[l];
            dp[a][pos] -= self.epsilon * load.p_nom;
            dq[a][pos] -= self.epsilon * load.q_nom;
        }
        InjectionCoeffs { p0, q0, dp, dq }
    }
}

/// Affine-in-xi description of net bus injections.
#[derive(Debug, Clone)]
pub struct InjectionCoeffs {
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    /// dp[a][bus]: sensitivity of bus active injection to xi_a
    pub dp: Vec<Vec<f64>>,
    pub dq: Vec<Vec<f64>>,
}

/// One sampled outcome, both as per-bus injections and per-device values.
#[derive(Debug, Clone)]
pub struct Realization {
    pub bus_p: Vec<f64>,
    pub bus_q: Vec<f64>,
    pub gen_p: Vec<f64>,
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
}

/// Monte-Carlo draws of xi, stored row-major (one row per sample).
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub n_dims: usize,
    pub n_samples: usize,
    data: Vec<f64>,
}

impl SampleBatch {
    /// Deterministic across platforms: fixed stream cipher RNG, explicit
    /// bit-to-float mapping, and libm transcendentals for the normal
    /// transform.
    pub fn draw(family: BasisFamily, n_dims: usize, n_samples: usize, seed: u64) -> SampleBatch {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n_dims * n_samples);
        for _ in 0..n_dims * n_samples {
            data.push(match family {
                BasisFamily::NormalizedUniform => {
                    let u = to_unit(rng.next_u64());
                    (2.0 * u - 1.0) * 3.0f64.sqrt()
                }
                BasisFamily::NormalizedGaussian => {
                    // Box-Muller, cosine branch only; u1 shifted into (0, 1]
                    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * 2.0f64.powi(-53);
                    let u2 = to_unit(rng.next_u64());
                    libm::sqrt(-2.0 * libm::log(u1))
                        * libm::cos(2.0 * std::f64::consts::PI * u2)
                }
            });
        }
        SampleBatch {
            n_dims,
            n_samples,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_dims..(i + 1) * self.n_dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n_dims)
    }
}

fn to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * 2.0f64.powi(-53)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::synthetic;

    #[test]
    fn zero_outcome_reproduces_nominal_injections() {
        let net = synthetic::case9();
        let topo = net.topology();
        let model =
            UncertaintyModel::new(&net, &topo, BasisFamily::NormalizedUniform, 2, 0.1).unwrap();
        let r = model.inject(&net, &topo, &[0.0, 0.0]);
        let (p, q) = crate::pf::nominal_injections(&net, &topo);
        for i in 0..net.n_bus() {
            assert!((r.bus_p[i] - p[i]).abs() <= 1e-15);
            assert!((r.bus_q[i] - q[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn injections_are_affine_and_match_linear_coefficients() {
        let net = synthetic::ring_grid(30, 1.0, 7);
        let topo = net.topology();
        let model =
            UncertaintyModel::new(&net, &topo, BasisFamily::NormalizedUniform, 4, 0.08).unwrap();
        let coeffs = model.linear_injections(&net, &topo);
        let batch = SampleBatch::draw(BasisFamily::NormalizedUniform, 4, 16, 99);
        for xi in batch.rows() {
            let r = model.inject(&net, &topo, xi);
            for i in 0..net.n_bus() {
                let mut p = coeffs.p0[i];
                let mut q = coeffs.q0[i];
                for a in 0..4 {
                    p += coeffs.dp[a][i] * xi[a];
                    q += coeffs.dq[a][i] * xi[a];
                }
                assert!((r.bus_p[i] - p).abs() <= 1e-12, "bus {i}");
                assert!((r.bus_q[i] - q).abs() <= 1e-12, "bus {i}");
            }
        }
        // affinity: f(a) + f(b) = 2 f((a+b)/2)
        let a = batch.row(0);
        let b = batch.row(1);
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        let ra = model.inject(&net, &topo, a);
        let rb = model.inject(&net, &topo, b);
        let rm = model.inject(&net, &topo, &mid);
        for i in 0..net.n_bus() {
            assert!((ra.bus_p[i] + rb.bus_p[i] - 2.0 * rm.bus_p[i]).abs() <= 1e-12);
        }
    }

    /// Recourse keeps the scheduled balance: total generation minus total
    /// load is unchanged by the outcome.
    #[test]
    fn recourse_preserves_scheduled_balance() {
        let net = synthetic::ring_grid(30, 1.0, 7);
        let topo = net.topology();
        let model =
            UncertaintyModel::new(&net, &topo, BasisFamily::NormalizedGaussian, 3, 0.05).unwrap();
        let nominal: f64 = net.generators.iter().map(|g| g.p_nom).sum::<f64>()
            - net.loads.iter().map(|l| l.p_nom).sum::<f64>();
        let batch = SampleBatch::draw(BasisFamily::NormalizedGaussian, 3, 32, 1);
        for xi in batch.rows() {
            let r = model.inject(&net, &topo, xi);
            let realized: f64 =
                r.gen_p.iter().sum::<f64>() - r.load_p.iter().sum::<f64>();
            assert!((realized - nominal).abs() <= 1e-12);
        }
    }

    #[test]
    fn chain_network_splits_at_the_middle() {
        let net = synthetic::four_bus_line();
        let topo = net.topology();
        // loads sit at the two ends of the chain 1-2-3-4
        let area = partition_areas(&net, &topo, 2).unwrap();
        let pos1 = topo.bus_pos[&1];
        let pos4 = topo.bus_pos[&4];
        assert_ne!(area[pos1], area[pos4]);
    }

    #[test]
    fn partition_balances_load_counts() {
        let net = synthetic::ring_grid(118, 1.0, 7);
        let topo = net.topology();
        for n_areas in [2usize, 5, 9] {
            let area = partition_areas(&net, &topo, n_areas).unwrap();
            let mut counts = vec![0usize; n_areas];
            for load in &net.loads {
                counts[area[topo.bus_pos[&load.bus]]] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            assert!(min >= 1, "{n_areas} areas: counts {counts:?}");
            assert!(max - min <= 2, "{n_areas} areas: counts {counts:?}");
        }
    }

    #[test]
    fn too_many_areas_is_rejected() {
        let net = synthetic::two_bus();
        let topo = net.topology();
        assert!(partition_areas(&net, &topo, 2).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = SampleBatch::draw(BasisFamily::NormalizedUniform, 3, 50, 42);
        let b = SampleBatch::draw(BasisFamily::NormalizedUniform, 3, 50, 42);
        let c = SampleBatch::draw(BasisFamily::NormalizedUniform, 3, 50, 43);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        let g = SampleBatch::draw(BasisFamily::NormalizedGaussian, 3, 50, 42);
        let g2 = SampleBatch::draw(BasisFamily::NormalizedGaussian, 3, 50, 42);
        assert_eq!(g.data, g2.data);
    }

    /// Both families produce mean 0 and variance 1; checked within four
    /// standard errors at 200k draws.
    #[test]
    fn samples_have_unit_variance() {
        for family in [BasisFamily::NormalizedUniform, BasisFamily::NormalizedGaussian] {
            let m = 200_000usize;
            let batch = SampleBatch::draw(family, 1, m, 7);
            let mean: f64 = batch.rows().map(|r| r[0]).sum::<f64>() / m as f64;
            let var: f64 =
                batch.rows().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            // var of the sample variance: (kurtosis - 1) / m; kurtosis is
            // 9/5 for the scaled uniform and 3 for the gaussian
            let kurt = match family {
                BasisFamily::NormalizedUniform => 1.8,
                BasisFamily::NormalizedGaussian => 3.0,
            };
            let se_mean = (1.0 / m as f64).sqrt();
            let se_var = ((kurt - 1.0) / m as f64).sqrt();
            assert!(mean.abs() <= 4.0 * se_mean, "{family:?} mean {mean}");
            assert!((var - 1.0).abs() <= 4.0 * se_var, "{family:?} var {var}");
            if family == BasisFamily::NormalizedUniform {
                assert!(batch.rows().all(|r| r[0].abs() <= 3.0f64.sqrt()));
            }
        }
    }
}
