//! Sparse on-disk format for fitted coefficient sets.
//!
//! Only nonzero coefficients are stored, keyed by (variable, bus id,
//! multi-index). The header pins everything a reader needs to rebuild the
//! dense layout: basis family, dimension count, degree, the index ordering
//! contract, and a digest of the case the fit belongs to.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisFamily, MultiIndexSet};
use crate::spice::{PceCoefficients, VarClass};
use crate::{Error, Result};

pub const FORMAT: &str = "pce-coefficients-v1";
/// Multi-indices enumerate by total degree, then descending lexicographic
/// within a degree; record order follows (variable, bus position, index
/// position).
pub const ORDERING: &str = "graded_lex_desc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub variable: VarClass,
    pub bus: usize,
    pub index: Vec<u8>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFile {
    pub format: String,
    /// hex digest of the case file this fit belongs to (empty when the case
    /// never touched disk)
    pub case_sha256: String,
    pub family: String,
    pub n_dims: usize,
    pub degree: usize,
    pub ordering: String,
    pub bus_ids: Vec<usize>,
    pub records: Vec<Record>,
}

pub fn encode(
    coeffs: &PceCoefficients,
    bus_ids: &[usize],
    case_sha256: &str,
) -> CoefficientFile {
    assert_eq!(bus_ids.len(), coeffs.n_bus);
    let mut records = Vec::new();
    for class in VarClass::ALL {
        let data = coeffs.class(class);
        for (pos, &bus) in bus_ids.iter().enumerate() {
            for k in 0..coeffs.k() {
                let value = data[k * coeffs.n_bus + pos];
                if value != 0.0 {
                    records.push(Record {
                        variable: class,
                        bus,
                        index: coeffs.set.index(k).to_vec(),
                        value,
                    });
                }
            }
        }
    }
    CoefficientFile {
        format: FORMAT.into(),
        case_sha256: case_sha256.into(),
        family: coeffs.family.name().into(),
        n_dims: coeffs.set.n,
        degree: coeffs.set.deg,
        ordering: ORDERING.into(),
        bus_ids: bus_ids.to_vec(),
        records,
    }
}

pub fn decode(file: &CoefficientFile) -> Result<PceCoefficients> {
    if file.format != FORMAT {
        return Err(Error::Input(format!(
            "unsupported coefficient format {:?}",
            file.format
        )));
    }
    if file.ordering != ORDERING {
        return Err(Error::Input(format!(
            "unsupported index ordering {:?}",
            file.ordering
        )));
    }
    let family = BasisFamily::parse(&file.family)?;
    if file.n_dims == 0 {
        return Err(Error::Input("coefficient file with zero dimensions".into()));
    }
    let set = MultiIndexSet::new(file.n_dims, file.degree);
    let n_bus = file.bus_ids.len();
    let kk = set.len();
    let mut coeffs = PceCoefficients {
        family,
        set,
        n_bus,
        vre: vec![0.0; kk * n_bus],
        vim: vec![0.0; kk * n_bus],
        p: vec![0.0; kk * n_bus],
        q: vec![0.0; kk * n_bus],
    };
    let bus_pos = |bus: usize| file.bus_ids.iter().position(|&b| b == bus);
    let mut seen: BTreeSet<(u8, usize, usize)> = BTreeSet::new();
    for rec in &file.records {
        let pos = bus_pos(rec.bus)
            .ok_or_else(|| Error::Input(format!("record for unknown bus {}", rec.bus)))?;
        let k = coeffs.set.position_of(&rec.index).ok_or_else(|| {
            Error::Input(format!(
                "multi-index {:?} outside the (n={}, deg={}) set",
                rec.index, file.n_dims, file.degree
            ))
        })?;
        if !seen.insert((rec.variable.idx() as u8, pos, k)) {
            return Err(Error::Input(format!(
                "duplicate record for {} at bus {} index {:?}",
                rec.variable.name(),
                rec.bus,
                rec.index
            )));
        }
        coeffs.class_mut(rec.variable)[k * n_bus + pos] = rec.value;
    }
    Ok(coeffs)
}

pub fn to_json(file: &CoefficientFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("coefficient file serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<CoefficientFile> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::ProductTensors;
    use crate::net::{build_admittance, synthetic};
    use crate::spice::{spice, SpiceConfig};
    use crate::stochastic::UncertaintyModel;

    fn fitted() -> (PceCoefficients, Vec<usize>) {
        let net = synthetic::case9();
        let topo = net.topology();
        let y = build_admittance(&net, &topo);
        let model =
            UncertaintyModel::new(&net, &topo, BasisFamily::NormalizedUniform, 2, 0.03).unwrap();
        let set = MultiIndexSet::new(2, 2);
        let tensors = ProductTensors::build(BasisFamily::NormalizedUniform, &set);
        // a visible cutoff so the mask zeroes some entries and the file
        // actually exercises sparse skipping
        let cfg = SpiceConfig {
            c_off: 1e-3,
            ..SpiceConfig::default()
        };
        let out = spice(&net, &topo, &y, &model, &tensors, &cfg).unwrap();
        let bus_ids = net.buses.iter().map(|b| b.id).collect();
        (out.coefficients, bus_ids)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (coeffs, bus_ids) = fitted();
        let file = encode(&coeffs, &bus_ids, "abc123");
        let text = to_json(&file);
        let back = decode(&from_json(&text).unwrap()).unwrap();
        assert_eq!(back.vre, coeffs.vre);
        assert_eq!(back.vim, coeffs.vim);
        assert_eq!(back.p, coeffs.p);
        assert_eq!(back.q, coeffs.q);
        assert_eq!(back.family, coeffs.family);
        assert_eq!(back.n_bus, coeffs.n_bus);

        // and the serialized form itself is stable
        let again = to_json(&encode(&back, &bus_ids, "abc123"));
        assert_eq!(again, text);
    }

    #[test]
    fn zeros_are_skipped_and_restored() {
        let (coeffs, bus_ids) = fitted();
        let zeros = coeffs.vre.iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 0, "mask must zero something for this test");
        let file = encode(&coeffs, &bus_ids, "");
        let stored = file
            .records
            .iter()
            .filter(|r| r.variable == VarClass::VRe)
            .count();
        assert_eq!(stored, coeffs.vre.len() - zeros);
        assert!(file.records.iter().all(|r| r.value != 0.0));
    }

    #[test]
    fn degree_one_files_have_no_degree_two_entries() {
        let (coeffs, bus_ids) = fitted();
        let set1 = MultiIndexSet::new(2, 1);
        let mut deg1 = PceCoefficients {
            family: coeffs.family,
            set: set1.clone(),
            n_bus: coeffs.n_bus,
            vre: vec![0.0; set1.len() * coeffs.n_bus],
            vim: vec![0.0; set1.len() * coeffs.n_bus],
            p: vec![0.0; set1.len() * coeffs.n_bus],
            q: vec![0.0; set1.len() * coeffs.n_bus],
        };
        for k in 0..set1.len() {
            let src = coeffs.set.position_of(set1.index(k)).unwrap();
            for i in 0..coeffs.n_bus {
                deg1.vre[k * coeffs.n_bus + i] = coeffs.vre[src * coeffs.n_bus + i];
                deg1.vim[k * coeffs.n_bus + i] = coeffs.vim[src * coeffs.n_bus + i];
            }
        }
        let file = encode(&deg1, &bus_ids, "");
        assert_eq!(file.degree, 1);
        assert!(file
            .records
            .iter()
            .all(|r| r.index.iter().map(|&e| e as usize).sum::<usize>() <= 1));
        let back = decode(&file).unwrap();
        assert_eq!(back.vre, deg1.vre);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let (coeffs, bus_ids) = fitted();
        let good = encode(&coeffs, &bus_ids, "");

        let mut bad = good.clone();
        bad.format = "something-else".into();
        assert!(decode(&bad).is_err());

        let mut bad = good.clone();
        bad.ordering = "colex".into();
        assert!(decode(&bad).is_err());

        let mut bad = good.clone();
        bad.family = "cauchy".into();
        assert!(decode(&bad).is_err());

        let mut bad = good.clone();
        bad.records[0].bus = 4321;
        assert!(decode(&bad).is_err());

        let mut bad = good.clone();
        bad.records[0].index = vec![9, 9];
        assert!(decode(&bad).is_err());

        let mut bad = good.clone();
        let dup = bad.records[0].clone();
        bad.records.push(dup);
        assert!(decode(&bad).is_err());
    }
}
