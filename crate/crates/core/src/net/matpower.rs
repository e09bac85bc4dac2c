//! Parser for the MATPOWER-style case subset: `baseMVA`, `bus`, `gen`,
//! `branch` and polynomial `gencost` tables. Everything else (cell arrays,
//! comments, MATLAB code after the tables) is skipped.
//!
//! Input quantities are MW/MVAr/degrees as usual; the returned [`Network`]
//! is per-unit with radians. Out-of-service branches and generators are
//! dropped while reading. Loads are synthesized from buses with nonzero
//! demand.

use num_complex::Complex64;

use super::{Branch, Bus, BusKind, Generator, Load, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Bus,
    Gen,
    Branch,
    GenCost,
    SkippedMatrix,
    SkippedCell,
}

struct Row {
    line: usize,
    values: Vec<f64>,
}

pub fn parse(text: &str) -> Result<Network> {
    let mut base_mva = None;
    let mut bus_rows: Vec<Row> = Vec::new();
    let mut gen_rows: Vec<Row> = Vec::new();
    let mut branch_rows: Vec<Row> = Vec::new();
    let mut cost_rows: Vec<Row> = Vec::new();
    let mut section = Section::None;

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = match raw.find('%') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        if section == Section::None {
            if let Some(rest) = line.strip_prefix("mpc.baseMVA") {
                let value = rest
                    .trim_start()
                    .strip_prefix('=')
                    .map(|v| v.trim().trim_end_matches(';').trim())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: "malformed baseMVA assignment".into(),
                    })?;
                base_mva = Some(value.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad baseMVA value {value:?}"),
                })?);
                continue;
            }
            if let Some(rest) = line.strip_prefix("mpc.") {
                if let Some(eq) = rest.find('=') {
                    let name = rest[..eq].trim();
                    let tail = rest[eq + 1..].trim();
                    if tail.starts_with('[') {
                        section = match name {
                            "bus" => Section::Bus,
                            "gen" => Section::Gen,
                            "branch" => Section::Branch,
                            "gencost" => Section::GenCost,
                            _ => Section::SkippedMatrix,
                        };
                        // rows may start on the same line as the bracket
                        let inline = tail[1..].trim();
                        if !inline.is_empty() {
                            section = consume_matrix_line(
                                inline,
                                line_no,
                                section,
                                &mut bus_rows,
                                &mut gen_rows,
                                &mut branch_rows,
                                &mut cost_rows,
                            )?;
                        }
                        continue;
                    }
                    if tail.starts_with('{') {
                        section = Section::SkippedCell;
                        continue;
                    }
                    // scalar or string assignment we do not care about
                    continue;
                }
            }
            continue;
        }

        section = consume_matrix_line(
            line,
            line_no,
            section,
            &mut bus_rows,
            &mut gen_rows,
            &mut branch_rows,
            &mut cost_rows,
        )?;
    }

    let base = base_mva.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "case has no baseMVA".into(),
    })?;
    if bus_rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "case has no bus table".into(),
        });
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut loads = Vec::new();
    for row in &bus_rows {
        let v = &row.values;
        if v.len() < 13 {
            return Err(Error::Parse {
                line: row.line,
                msg: format!("bus row has {} columns, expected 13", v.len()),
            });
        }
        let id = v[0] as usize;
        let kind = match v[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            t => {
                return Err(Error::Parse {
                    line: row.line,
                    msg: format!("bus {id}: unsupported bus type {t}"),
                })
            }
        };
        let nominal_v = if v[7] > 0.0 { v[7] } else { 1.0 };
        buses.push(Bus {
            id,
            kind,
            v_min: v[12],
            v_max: v[11],
            nominal_v,
            shunt_g: v[4] / base,
            shunt_b: v[5] / base,
        });
        if v[2] != 0.0 || v[3] != 0.0 {
            loads.push(Load {
                bus: id,
                p_nom: v[2] / base,
                q_nom: v[3] / base,
            });
        }
    }

    let mut generators = Vec::new();
    let mut kept_gen_rows = Vec::new();
    for (orig, row) in gen_rows.iter().enumerate() {
        let v = &row.values;
        if v.len() < 10 {
            return Err(Error::Parse {
                line: row.line,
                msg: format!("gen row has {} columns, expected at least 10", v.len()),
            });
        }
        if v[7] <= 0.0 {
            log::debug!("dropping out-of-service generator at bus {}", v[0] as usize);
            continue;
        }
        kept_gen_rows.push(orig);
        generators.push(Generator {
            bus: v[0] as usize,
            p_nom: v[1] / base,
            v_nom: v[5],
            p_min: v[9] / base,
            p_max: v[8] / base,
            q_min: v[4] / base,
            q_max: v[3] / base,
            cost: Vec::new(),
        });
    }

    if !cost_rows.is_empty() {
        // gencost rows follow the original gen table; a second block of rows
        // (reactive costs) is ignored when present
        for (gi, &orig) in kept_gen_rows.iter().enumerate() {
            let Some(row) = cost_rows.get(orig) else {
                break;
            };
            let v = &row.values;
            if v.len() < 4 {
                return Err(Error::Parse {
                    line: row.line,
                    msg: "gencost row too short".into(),
                });
            }
            let model = v[0] as i64;
            if model != 2 {
                return Err(Error::Parse {
                    line: row.line,
                    msg: format!("unsupported gencost model {model} (only polynomial)"),
                });
            }
            let ncost = v[3] as usize;
            if v.len() < 4 + ncost {
                return Err(Error::Parse {
                    line: row.line,
                    msg: format!("gencost row promises {ncost} coefficients"),
                });
            }
            // file stores highest power first
            generators[gi].cost = v[4..4 + ncost].iter().rev().copied().collect();
        }
    }

    let mut branches = Vec::new();
    let mut dropped = 0usize;
    for row in &branch_rows {
        let v = &row.values;
        if v.len() < 11 {
            return Err(Error::Parse {
                line: row.line,
                msg: format!("branch row has {} columns, expected at least 11", v.len()),
            });
        }
        if v[10] == 0.0 {
            dropped += 1;
            continue;
        }
        let (r, x) = (v[2], v[3]);
        if r == 0.0 && x == 0.0 {
            return Err(Error::Parse {
                line: row.line,
                msg: format!("branch {} -> {} has zero impedance", v[0], v[1]),
            });
        }
        let z = Complex64::new(r, x);
        branches.push(Branch {
            from_bus: v[0] as usize,
            to_bus: v[1] as usize,
            series_admittance: z.inv(),
            charging: v[4],
            tap: if v[8] == 0.0 { 1.0 } else { v[8] },
            shift: v[9].to_radians(),
            s_max: v[5] / base,
        });
    }
    if dropped > 0 {
        log::debug!("dropped {dropped} out-of-service branches");
    }

    let net = Network {
        base_mva: base,
        buses,
        branches,
        generators,
        loads,
    };
    net.validate()?;
    Ok(net)
}

#[allow(clippy::too_many_arguments)]
fn consume_matrix_line(
    line: &str,
    line_no: usize,
    section: Section,
    bus_rows: &mut Vec<Row>,
    gen_rows: &mut Vec<Row>,
    branch_rows: &mut Vec<Row>,
    cost_rows: &mut Vec<Row>,
) -> Result<Section> {
    if section == Section::SkippedCell {
        if line.contains('}') {
            return Ok(Section::None);
        }
        return Ok(Section::SkippedCell);
    }
    let (body, closes) = match line.find(']') {
        Some(p) => (&line[..p], true),
        None => (line, false),
    };
    let body = body.trim();
    if !body.is_empty() && section != Section::SkippedMatrix {
        // one or more rows separated by semicolons
        for row in body.split(';') {
            let row = row.trim();
            if row.is_empty() {
                continue;
            }
            let mut values = Vec::new();
            for tok in row.split_whitespace() {
                // tolerate commas as separators
                for piece in tok.split(',') {
                    if piece.is_empty() {
                        continue;
                    }
                    values.push(piece.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad number {piece:?}"),
                    })?);
                }
            }
            if values.is_empty() {
                continue;
            }
            let row = Row {
                line: line_no,
                values,
            };
            match section {
                Section::Bus => bus_rows.push(row),
                Section::Gen => gen_rows.push(row),
                Section::Branch => branch_rows.push(row),
                Section::GenCost => cost_rows.push(row),
                _ => {}
            }
        }
    }
    Ok(if closes { Section::None } else { section })
}
