//! Deterministic synthetic grids for tests and benchmarks.
//!
//! `ring_grid` builds a meshed ring of arbitrary size with generators and
//! loads placed by a fixed-seed generator, so every call with the same
//! arguments yields the same network on every platform. The small
//! hand-written fixtures below it have closed-form or symmetry-checkable
//! solutions.

use num_complex::Complex64;
use rand_core::{RngCore, SeedableRng};

use super::{Branch, Bus, BusKind, Generator, Load, Network};

/// Spacing between generator buses along the ring.
const GEN_STEP: usize = 6;
/// Fraction of the remaining buses that carry load.
const LOAD_PROB: f64 = 0.75;
/// Chord every this many buses...
const CHORD_STEP: usize = 5;
/// ...spanning this fraction of the ring.
const CHORD_SPAN_DIV: usize = 10;

fn unit(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Meshed ring grid with `n_bus` buses. `load_scale` scales every load;
/// 1.0 gives a moderately loaded system, values toward 2.0 stress it.
pub fn ring_grid(n_bus: usize, load_scale: f64, seed: u64) -> Network {
    assert!(n_bus >= 4, "ring grid needs at least 4 buses");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut buses = Vec::with_capacity(n_bus);
    let mut gen_buses = Vec::new();
    for i in 0..n_bus {
        let id = i + 1;
        let is_gen = i % GEN_STEP == 0;
        let kind = if i == 0 {
            BusKind::Slack
        } else if is_gen {
            BusKind::Pv
        } else {
            BusKind::Pq
        };
        if is_gen {
            gen_buses.push(id);
        }
        buses.push(Bus {
            id,
            kind,
            v_min: 0.94,
            v_max: 1.06,
            nominal_v: 1.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
        });
    }

    let mut loads = Vec::new();
    for i in 0..n_bus {
        if i % GEN_STEP == 0 {
            continue;
        }
        if unit(&mut rng) < LOAD_PROB {
            let p = load_scale * (0.05 + 0.14 * unit(&mut rng));
            let q = p * (0.25 + 0.20 * unit(&mut rng));
            loads.push(Load {
                bus: i + 1,
                p_nom: p,
                q_nom: q,
            });
        }
    }
    let total_load: f64 = loads.iter().map(|l| l.p_nom).sum();

    let mut branches = Vec::new();
    for i in 0..n_bus {
        let j = (i + 1) % n_bus;
        let r = 0.015 + 0.010 * unit(&mut rng);
        let x = 0.060 + 0.030 * unit(&mut rng);
        let b = 0.020 + 0.020 * unit(&mut rng);
        branches.push(Branch {
            from_bus: i + 1,
            to_bus: j + 1,
            series_admittance: Complex64::new(r, x).inv(),
            charging: b,
            tap: 1.0,
            shift: 0.0,
            s_max: (total_load / 4.0).max(1.5),
        });
    }
    let span = (n_bus / CHORD_SPAN_DIV).max(3);
    let mut i = 0;
    while i < n_bus {
        let j = (i + span) % n_bus;
        let r = 0.020 + 0.010 * unit(&mut rng);
        let x = 0.090 + 0.040 * unit(&mut rng);
        branches.push(Branch {
            from_bus: i + 1,
            to_bus: j + 1,
            series_admittance: Complex64::new(r, x).inv(),
            charging: 0.03,
            tap: 1.0,
            shift: 0.0,
            s_max: (total_load / 5.0).max(1.2),
        });
        i += CHORD_STEP;
    }

    // generator shares covering the load plus a loss margin
    let shares: Vec<f64> = gen_buses.iter().map(|_| 0.9 + 0.2 * unit(&mut rng)).collect();
    let share_sum: f64 = shares.iter().sum();
    let mut generators = Vec::new();
    for (gi, &bus) in gen_buses.iter().enumerate() {
        let p_nom = total_load * 1.02 * shares[gi] / share_sum;
        let p_max = 2.5 * p_nom + 0.5;
        generators.push(Generator {
            bus,
            p_nom,
            v_nom: 1.01 + 0.03 * unit(&mut rng),
            p_min: 0.0,
            p_max,
            q_min: -(0.6 * p_max + 0.3),
            q_max: 0.6 * p_max + 0.3,
            cost: vec![0.0, 8.0 + 20.0 * unit(&mut rng), 0.02 + 0.10 * unit(&mut rng)],
        });
    }

    let net = Network {
        base_mva: 100.0,
        buses,
        branches,
        generators,
        loads,
    };
    net.validate().expect("synthetic grid must validate");
    net
}

/// The committed 9-bus case.
pub fn case9() -> Network {
    matpower_fixture(include_str!("../../../../cases/case9.m"))
}

fn matpower_fixture(text: &str) -> Network {
    super::matpower::parse(text).expect("fixture case must parse")
}

/// Slack feeding a single PQ load over one line; small enough to solve by
/// hand from the quadratic voltage equation.
pub fn two_bus() -> Network {
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
                shunt_b: 0.0,
            },
        ],
        branches: vec![Branch {
            from_bus: 1,
            to_bus: 2,
            series_admittance: Complex64::new(0.02, 0.10).inv(),
            charging: 0.0,
            tap: 1.0,
            shift: 0.0,
            s_max: 2.0,
        }],
        generators: vec![Generator {
            bus: 1,
            p_nom: 0.5,
            v_nom: 1.0,
            p_min: 0.0,
            p_max: 3.0,
            q_min: -2.0,
            q_max: 2.0,
            cost: vec![0.0, 10.0, 0.02],
        }],
        loads: vec![Load {
            bus: 2,
            p_nom: 0.5,
            q_nom: 0.2,
        }],
    }
}

/// Two identical generators feeding one load over identical lines; the
/// optimal dispatch must be symmetric.
pub fn three_bus_symmetric() -> Network {
    let gen = |bus: usize| Generator {
        bus,
        p_nom: 0.55,
        v_nom: 1.02,
        p_min: 0.0,
        p_max: 2.0,
        q_min: -1.5,
        q_max: 1.5,
        cost: vec![0.0, 12.0, 0.06],
    };
    let line = |from_bus: usize, to_bus: usize| Branch {
        from_bus,
        to_bus,
        series_admittance: Complex64::new(0.01, 0.08).inv(),
        charging: 0.02,
        tap: 1.0,
        shift: 0.0,
        s_max: 2.0,
    };
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
                kind: BusKind::Pv,
                v_min: 0.9,
                v_max: 1.1,
                nominal_v: 1.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
            },
            Bus {
                id: 3,
                kind: BusKind::Pq,
                v_min: 0.9,
                v_max: 1.1,
                nominal_v: 1.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
            },
        ],
        branches: vec![line(1, 3), line(2, 3)],
        generators: vec![gen(1), gen(2)],
        loads: vec![Load {
            bus: 3,
            p_nom: 1.0,
            q_nom: 0.3,
        }],
    }
}

/// Four buses in a line with loads only at the two ends; the two load
/// clusters are separated by the unloaded middle.
pub fn four_bus_line() -> Network {
    let pq = |id: usize| Bus {
        id,
        kind: BusKind::Pq,
        v_min: 0.9,
        v_max: 1.1,
        nominal_v: 1.0,
        shunt_g: 0.0,
        shunt_b: 0.0,
    };
    let line = |from_bus: usize, to_bus: usize| Branch {
        from_bus,
        to_bus,
        series_admittance: Complex64::new(0.01, 0.06).inv(),
        charging: 0.0,
        tap: 1.0,
        shift: 0.0,
        s_max: 1.0,
    };
    let mut buses = vec![pq(1), pq(2), pq(3), pq(4)];
    buses[1].kind = BusKind::Slack;
    Network {
        base_mva: 100.0,
        buses,
        branches: vec![line(1, 2), line(2, 3), line(3, 4)],
        generators: vec![Generator {
            bus: 2,
            p_nom: 0.4,
            v_nom: 1.0,
            p_min: 0.0,
            p_max: 2.0,
            q_min: -1.0,
            q_max: 1.0,
            cost: vec![0.0, 10.0],
        }],
        loads: vec![
            Load {
                bus: 1,
                p_nom: 0.15,
                q_nom: 0.05,
            },
            Load {
                bus: 4,
                p_nom: 0.2,
                q_nom: 0.06,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_grid_is_deterministic() {
        let a = ring_grid(30, 1.0, 7);
        let b = ring_grid(30, 1.0, 7);
        assert_eq!(a, b);
        let c = ring_grid(30, 1.0, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn ring_grid_shapes() {
        let net = ring_grid(30, 1.0, 7);
        assert_eq!(net.n_bus(), 30);
        assert_eq!(net.generators.len(), 5);
        assert!(net.loads.len() >= 9, "want enough loads for partitioning");
        let net = ring_grid(118, 1.0, 7);
        assert_eq!(net.n_bus(), 118);
        assert!(net.generators.len() >= 15);
        assert!(net.loads.len() >= 60);
    }

    #[test]
    fn fixtures_validate() {
        two_bus().validate().unwrap();
        three_bus_symmetric().validate().unwrap();
        four_bus_line().validate().unwrap();
        assert_eq!(case9().n_bus(), 9);
    }
}
