//! Batch front door: fit chaos expansions, run Monte-Carlo baselines,
//! compare reports by TV distance, and drive the chance-constrained OPF,
//! all from a config file with flag overrides.
//!
//! Exit codes: 0 success, 2 config or input error, 3 solver
//! non-convergence, 4 infeasible CC-OPF.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spiceuq::basis::{MultiIndexSet, ProductTensors};
use spiceuq::ccopf::{self, CcOpfConfig};
use spiceuq::coeffio;
use spiceuq::net::{build_admittance, AdmittanceMatrix, Network, Topology};
use spiceuq::pf::NewtonOptions;
use spiceuq::spice::{pce_full, spice, PceCoefficients, SpiceConfig};
use spiceuq::stochastic::{partition_areas, SampleBatch, UncertaintyModel};
use spiceuq::uq::{self, ReportComparison, UqReport};
use spiceuq::{Error, Result};

use config::{CommonArgs, RunConfig};

#[derive(Parser)]
#[command(
    name = "spiceuq",
    version,
    about = "Sparse polynomial-chaos uncertainty quantification for AC power flow"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the sparse iterative degree-2 expansion, then sample and report
    Spice,
    /// Fit the full (unmasked, untruncated) expansion by a square solve
    PceFull,
    /// Monte-Carlo baseline over the same uncertainty model
    Mc,
    /// TV-distance table between two report files
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
    },
    /// Iterative chance-constrained OPF with a Monte-Carlo certificate
    Ccopf,
    /// Dump the bus-to-area assignment used for load clustering
    Partition,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Input(_)
        | Error::Io(_)
        | Error::Serde(_) => 2,
        Error::NonConvergence { .. } | Error::Singular(_) => 3,
        Error::Infeasible(_) => 4,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.common.threads {
        // a second builder call in the same process is fine to ignore: the
        // pool can only be set once and results do not depend on its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    let cfg = config::resolve(&cli.common)?;
    match &cli.command {
        Command::Spice => cmd_fit(&cfg, Method::Sparse),
        Command::PceFull => cmd_fit(&cfg, Method::Full),
        Command::Mc => cmd_mc(&cfg),
        Command::Compare { report_a, report_b } => cmd_compare(&cfg, report_a, report_b),
        Command::Ccopf => cmd_ccopf(&cfg),
        Command::Partition => cmd_partition(&cfg),
    }
}

struct LoadedCase {
    net: Network,
    topo: Topology,
    y: AdmittanceMatrix,
    sha256: String,
}

fn load_case(path: &Path) -> Result<LoadedCase> {
    let net = Network::from_file(path)?;
    let mut sha256 = String::with_capacity(64);
    for byte in Sha256::digest(std::fs::read(path)?) {
        let _ = write!(sha256, "{byte:02x}");
    }
    let topo = net.topology();
    let y = build_admittance(&net, &topo);
    Ok(LoadedCase {
        net,
        topo,
        y,
        sha256,
    })
}

enum Method {
    Sparse,
    Full,
}

/// Diagnostics of a `spice` fit. Wall times are logged, not persisted, so
/// reruns stay bit-identical.
#[derive(Serialize)]
struct SparseFitSummary {
    family: &'static str,
    n_dims: usize,
    degree: usize,
    basis_size: usize,
    pf_iterations: usize,
    deg1_iterations: usize,
    deg2_iterations: usize,
    deg2_objective: f64,
    deg2_converged: bool,
    sparsity_fraction: f64,
    galerkin_residual: f64,
    full_pair_count: usize,
    used_pair_count: usize,
    tensor_entries: usize,
}

#[derive(Serialize)]
struct FullFitSummary {
    family: &'static str,
    n_dims: usize,
    degree: usize,
    basis_size: usize,
    newton_iterations: usize,
}

fn cmd_fit(cfg: &RunConfig, method: Method) -> Result<()> {
    let case = load_case(cfg.case()?)?;
    let model = UncertaintyModel::new(&case.net, &case.topo, cfg.family, cfg.n_areas, cfg.epsilon)?;
    let set = MultiIndexSet::new(model.n_dims(), cfg.degree);
    let tensors = ProductTensors::build(cfg.family, &set);
    let spice_cfg = SpiceConfig {
        c_off: cfg.c_off,
        truncate_quartic: cfg.truncate_quartic,
        ..SpiceConfig::default()
    };

    let prefix;
    let coeffs: PceCoefficients;
    match method {
        Method::Sparse => {
            prefix = "spice";
            let out = spice(&case.net, &case.topo, &case.y, &model, &tensors, &spice_cfg)?;
            let d = &out.diagnostics;
            let summary = SparseFitSummary {
                family: cfg.family.name(),
                n_dims: model.n_dims(),
                degree: cfg.degree,
                basis_size: set.len(),
                pf_iterations: d.pf_iterations,
                deg1_iterations: d.deg1_iterations,
                deg2_iterations: d.deg2_iterations,
                deg2_objective: d.deg2_objective,
                deg2_converged: d.deg2_converged,
                sparsity_fraction: d.sparsity_fraction,
                galerkin_residual: d.galerkin_residual,
                full_pair_count: d.full_pair_count,
                used_pair_count: d.used_pair_count,
                tensor_entries: d.tensor_entries,
            };
            write_json(&cfg.out_dir, "spice.fit.json", &summary)?;
            coeffs = out.coefficients;
        }
        Method::Full => {
            prefix = "pce_full";
            let (c, iterations) = pce_full(
                &case.net,
                &case.topo,
                &case.y,
                &model,
                &tensors,
                spice_cfg.newton,
            )?;
            log::info!("full fit: K={}, {} Newton iterations", set.len(), iterations);
            let summary = FullFitSummary {
                family: cfg.family.name(),
                n_dims: model.n_dims(),
                degree: cfg.degree,
                basis_size: set.len(),
                newton_iterations: iterations,
            };
            write_json(&cfg.out_dir, "pce_full.fit.json", &summary)?;
            coeffs = c;
        }
    }

    let bus_ids: Vec<usize> = case.net.buses.iter().map(|b| b.id).collect();
    let coeff_file = coeffio::encode(&coeffs, &bus_ids, &case.sha256);
    write_text(
        &cfg.out_dir,
        &format!("{prefix}.coeffs.json"),
        &coeffio::to_json(&coeff_file),
    )?;

    let batch = SampleBatch::draw(cfg.family, model.n_dims(), cfg.samples, cfg.seed);
    let samples = uq::evaluate_pce(&case.net, &case.topo, &case.y, &model, &coeffs, &batch);
    let mut report = uq::build_report(&case.net, &samples, &cfg.deltas)?;
    filter_quantities(&mut report, &cfg.quantities);
    write_json(&cfg.out_dir, &format!("{prefix}.report.json"), &report)
}

fn cmd_mc(cfg: &RunConfig) -> Result<()> {
    let case = load_case(cfg.case()?)?;
    let model = UncertaintyModel::new(&case.net, &case.topo, cfg.family, cfg.n_areas, cfg.epsilon)?;
    let samples = uq::run_monte_carlo(
        &case.net,
        &case.topo,
        &case.y,
        &model,
        cfg.samples,
        cfg.seed,
        NewtonOptions::default(),
    )?;
    log::info!(
        "monte carlo: {} samples, {} failures",
        samples.n_samples,
        samples.failures
    );
    let mut report = uq::build_report(&case.net, &samples, &cfg.deltas)?;
    filter_quantities(&mut report, &cfg.quantities);
    write_json(&cfg.out_dir, "mc.report.json", &report)
}

#[derive(Serialize)]
struct TvRow {
    row: String,
    value: f64,
}

#[derive(Serialize)]
struct CompareFile {
    table: Vec<TvRow>,
    mean_tv: BTreeMap<String, f64>,
    per_quantity: Vec<(String, f64)>,
}

/// Average and maximum TV per quantity class, in the fixed row order
/// voltage then flow.
fn tv_table(cmp: &ReportComparison) -> Vec<TvRow> {
    let mut rows = Vec::new();
    for (label, kind) in [("Voltage", "v_mag"), ("Flow", "s_from")] {
        let tvs: Vec<f64> = cmp
            .per_quantity
            .iter()
            .filter(|(name, _)| name.split('[').next() == Some(kind))
            .map(|&(_, tv)| tv)
            .collect();
        if tvs.is_empty() {
            continue;
        }
        let ave = tvs.iter().sum::<f64>() / tvs.len() as f64;
        let max = tvs.iter().fold(f64::MIN, |a, &b| a.max(b));
        rows.push(TvRow {
            row: format!("Ave TV {label}"),
            value: ave,
        });
        rows.push(TvRow {
            row: format!("Max TV {label}"),
            value: max,
        });
    }
    rows
}

fn cmd_compare(cfg: &RunConfig, path_a: &Path, path_b: &Path) -> Result<()> {
    let a: UqReport = serde_json::from_str(&std::fs::read_to_string(path_a)?)?;
    let b: UqReport = serde_json::from_str(&std::fs::read_to_string(path_b)?)?;
    let cmp = uq::compare_reports(&a, &b)?;
    let out = CompareFile {
        table: tv_table(&cmp),
        mean_tv: cmp.mean_tv.clone(),
        per_quantity: cmp.per_quantity,
    };
    write_json(&cfg.out_dir, "compare.json", &out)
}

#[derive(Serialize)]
struct GenDispatch {
    bus: usize,
    p: f64,
    q: f64,
}

#[derive(Serialize)]
struct BusVoltage {
    bus: usize,
    v_mag: f64,
    v_re: f64,
    v_im: f64,
}

#[derive(Serialize)]
struct DispatchFile {
    cost: f64,
    opf_iterations: usize,
    generators: Vec<GenDispatch>,
    buses: Vec<BusVoltage>,
    limits: ccopf::EffectiveLimits,
}

fn cmd_ccopf(cfg: &RunConfig) -> Result<()> {
    let case = load_case(cfg.case()?)?;
    let model = UncertaintyModel::new(&case.net, &case.topo, cfg.family, cfg.n_areas, cfg.epsilon)?;
    let set = MultiIndexSet::new(model.n_dims(), cfg.degree);
    let tensors = ProductTensors::build(cfg.family, &set);
    let cc = CcOpfConfig {
        delta: cfg.ccopf_delta,
        samples: cfg.samples,
        seed: cfg.seed,
        max_outer: cfg.ccopf_max_outer,
        tol: cfg.ccopf_tol,
        spice: SpiceConfig {
            c_off: cfg.c_off,
            truncate_quartic: cfg.truncate_quartic,
            ..SpiceConfig::default()
        },
        ..CcOpfConfig::default()
    };
    let out = ccopf::solve_cc_opf(&case.net, &case.topo, &case.y, &model, &tensors, &cc)?;
    log::info!(
        "ccopf: cost {:.6}, {} outer iterations, max validation violation {:.4}",
        out.operating_point.cost,
        out.certificate.iterations.len(),
        out.certificate
            .validation_violation
            .values()
            .fold(0.0f64, |a, &b| a.max(b)),
    );
    write_json(&cfg.out_dir, "ccopf.certificate.json", &out.certificate)?;

    let op = &out.operating_point;
    let dispatch = DispatchFile {
        cost: op.cost,
        opf_iterations: op.iterations,
        generators: case
            .net
            .generators
            .iter()
            .zip(op.pg.iter().zip(&op.qg))
            .map(|(g, (&p, &q))| GenDispatch { bus: g.bus, p, q })
            .collect(),
        buses: case
            .net
            .buses
            .iter()
            .enumerate()
            .map(|(i, bus)| BusVoltage {
                bus: bus.id,
                v_mag: op.state.re[i].hypot(op.state.im[i]),
                v_re: op.state.re[i],
                v_im: op.state.im[i],
            })
            .collect(),
        limits: out.limits,
    };
    write_json(&cfg.out_dir, "ccopf.dispatch.json", &dispatch)
}

#[derive(Serialize)]
struct BusArea {
    bus: usize,
    area: usize,
}

#[derive(Serialize)]
struct PartitionFile {
    n_areas: usize,
    assignment: Vec<BusArea>,
}

fn cmd_partition(cfg: &RunConfig) -> Result<()> {
    let case = load_case(cfg.case()?)?;
    let areas = partition_areas(&case.net, &case.topo, cfg.n_areas)?;
    let out = PartitionFile {
        n_areas: cfg.n_areas,
        assignment: case
            .net
            .buses
            .iter()
            .zip(&areas)
            .map(|(bus, &area)| BusArea { bus: bus.id, area })
            .collect(),
    };
    write_json(&cfg.out_dir, "partition.json", &out)
}

fn filter_quantities(report: &mut UqReport, kinds: &Option<Vec<String>>) {
    if let Some(kinds) = kinds {
        report.quantities.retain(|q| {
            let kind = q.name.split('[').next().unwrap_or("");
            kinds.iter().any(|k| k == kind)
        });
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}
