//! Run configuration: a TOML file plus command-line overrides, resolved into
//! one flat struct. Every flag mirrors a file key one-to-one; precedence is
//! flag over file over default.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use spiceuq::basis::BasisFamily;
use spiceuq::{Error, Result};

/// Quantity kinds a report can be restricted to. These are the prefixes of
/// report entry names, e.g. `v_mag[4]` or `s_from[1->2]`.
pub const QUANTITY_KINDS: [&str; 5] = ["v_mag", "s_from", "i_sq", "gen_p", "gen_q"];

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override file keys
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Case file (.m or .json)
    #[arg(long, global = true, value_name = "PATH")]
    pub case: Option<PathBuf>,

    /// Directory for output files [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// Worker threads for sample-parallel stages [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Number of load areas, i.e. stochastic dimensions [default: 3]
    #[arg(long, global = true, value_name = "N")]
    pub n_areas: Option<usize>,

    /// Relative standard deviation of each area's load [default: 0.03]
    #[arg(long, global = true, value_name = "EPS")]
    pub epsilon: Option<f64>,

    /// normalized_uniform or normalized_gaussian [default: normalized_uniform]
    #[arg(long, global = true, value_name = "NAME")]
    pub distribution: Option<String>,

    /// Seed for all sampling stages [default: 1]
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,

    /// Draw count for evaluation, baselines, and quantiles [default: 10000]
    #[arg(long, global = true, value_name = "M")]
    pub samples: Option<usize>,

    /// Sparsification cutoff on degree-1 coefficients [default: 1e-10]
    #[arg(long, global = true, value_name = "C")]
    pub c_off: Option<f64>,

    /// Drop products of two degree-2 terms from the residual [default: true]
    #[arg(long, global = true, value_name = "BOOL")]
    pub truncate_quartic: Option<bool>,

    /// Expansion degree, 1 or 2 [default: 2]
    #[arg(long, global = true, value_name = "D")]
    pub degree: Option<usize>,

    /// Monitored quantity kinds, comma separated [default: all]
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub quantities: Option<Vec<String>>,

    /// Quantile levels reported per quantity [default: 0.05]
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,

    /// Per-constraint violation target for ccopf [default: 0.05]
    #[arg(long, global = true, value_name = "DELTA")]
    pub delta: Option<f64>,

    /// Outer iteration cap for ccopf [default: 10]
    #[arg(long, global = true, value_name = "N")]
    pub max_outer: Option<usize>,

    /// Convergence threshold on tightening increments [default: 1e-6]
    #[arg(long, global = true, value_name = "TOL")]
    pub tol: Option<f64>,
}

/// On-disk layout. Everything is optional so a file only has to mention what
/// it overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    case: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    uncertainty: UncertaintySection,
    #[serde(default)]
    spice: SpiceSection,
    #[serde(default)]
    report: ReportSection,
    #[serde(default)]
    ccopf: CcopfSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct UncertaintySection {
    n_areas: Option<usize>,
    epsilon: Option<f64>,
    distribution: Option<String>,
    seed: Option<u64>,
    samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpiceSection {
    c_off: Option<f64>,
    truncate_quartic: Option<bool>,
    degree: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportSection {
    quantities: Option<Vec<String>>,
    deltas: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CcopfSection {
    delta: Option<f64>,
    max_outer: Option<usize>,
    tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    case: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub n_areas: usize,
    pub epsilon: f64,
    pub family: BasisFamily,
    pub seed: u64,
    pub samples: usize,
    pub c_off: f64,
    pub truncate_quartic: bool,
    pub degree: usize,
    /// None keeps every monitored quantity
    pub quantities: Option<Vec<String>>,
    pub deltas: Vec<f64>,
    pub ccopf_delta: f64,
    pub ccopf_max_outer: usize,
    pub ccopf_tol: f64,
}

impl RunConfig {
    pub fn case(&self) -> Result<&Path> {
        self.case.as_deref().ok_or_else(|| {
            Error::Input("no case file given (use --case or the `case` config key)".into())
        })
    }
}

pub fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let distribution = args
        .distribution
        .clone()
        .or(file.uncertainty.distribution)
        .unwrap_or_else(|| "normalized_uniform".into());
    let family = BasisFamily::parse(&distribution)?;

    let epsilon = args.epsilon.or(file.uncertainty.epsilon).unwrap_or(0.03);
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Input(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }

    let degree = args.degree.or(file.spice.degree).unwrap_or(2);
    if degree != 1 && degree != 2 {
        return Err(Error::Input(format!("degree must be 1 or 2, got {degree}")));
    }

    let c_off = args.c_off.or(file.spice.c_off).unwrap_or(1e-10);
    if c_off < 0.0 {
        return Err(Error::Input(format!(
            "c_off must be nonnegative, got {c_off}"
        )));
    }

    let samples = args.samples.or(file.uncertainty.samples).unwrap_or(10_000);
    if samples == 0 {
        return Err(Error::Input("samples must be positive".into()));
    }

    let deltas = args
        .deltas
        .clone()
        .or(file.report.deltas)
        .unwrap_or_else(|| vec![0.05]);
    for &d in &deltas {
        if !(0.0 < d && d < 1.0) {
            return Err(Error::Input(format!(
                "quantile levels must lie in (0, 1), got {d}"
            )));
        }
    }

    let quantities = args.quantities.clone().or(file.report.quantities);
    if let Some(kinds) = &quantities {
        for kind in kinds {
            if !QUANTITY_KINDS.contains(&kind.as_str()) {
                return Err(Error::Input(format!(
                    "unknown quantity kind {kind:?} (expected one of {QUANTITY_KINDS:?})"
                )));
            }
        }
    }

    Ok(RunConfig {
        case: args.case.clone().or(file.case),
        out_dir: args
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("out")),
        n_areas: args.n_areas.or(file.uncertainty.n_areas).unwrap_or(3),
        epsilon,
        family,
        seed: args.seed.or(file.uncertainty.seed).unwrap_or(1),
        samples,
        c_off,
        truncate_quartic: args
            .truncate_quartic
            .or(file.spice.truncate_quartic)
            .unwrap_or(true),
        degree,
        quantities,
        deltas,
        ccopf_delta: args.delta.or(file.ccopf.delta).unwrap_or(0.05),
        ccopf_max_outer: args.max_outer.or(file.ccopf.max_outer).unwrap_or(10),
        ccopf_tol: args.tol.or(file.ccopf.tol).unwrap_or(1e-6),
    })
}
