use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use smm_core::data::{collapse_equivalent_levels, ingest_csv, write_csv, Columns};
use smm_core::late::{decompose, DecompositionForm};
use smm_core::numerics::RngStream;
use smm_core::report::{FitReport, Provenance};
use smm_core::simulate::{
    apply_overrides, design_by_name, parse_assignment, probit_population_quantities, run_replications, EstimatorSpec,
    Method, SimConfig, SimDesign,
};
use smm_core::{Dataset, Encoding, EstimationData, InstrumentSpec, SmmError};

use crate::render;

#[derive(Debug, Parser)]
#[command(name = "smm", version, about = "Structural mean models with multiple instruments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a structural mean model to a CSV file.
    Fit(FitArgs),
    /// Run Monte Carlo replications of a simulation design.
    Simulate(SimulateArgs),
    /// Decompose the instrument-level estimates of a CSV file.
    Decompose(DecomposeArgs),
    /// Draw one dataset from a simulation design and write it as CSV.
    Draw(DrawArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Headed CSV file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "x")]
    exposure: String,
    #[arg(long, default_value = "z")]
    instrument: String,
}

impl DataArgs {
    fn columns(&self) -> Columns {
        Columns::new(&self.outcome, &self.exposure, &self.instrument)
    }

    fn load(&self) -> Result<Dataset, Failure> {
        Ok(ingest_csv(&self.data, &self.columns())?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EncodeArg {
    Indicators,
    Raw,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// additive, mult, mult-log, mult-ratio, logistic, logistic-2sgmm, logistic-plugin or 2sls.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 2)]
    steps: u8,
    /// Stack moments for the instrument means with the structural moments.
    #[arg(long)]
    expanded: bool,
    #[arg(long, value_enum, default_value = "indicators")]
    encode: EncodeArg,
    /// Merge instrument levels whose mean exposure agrees within this relative tolerance.
    #[arg(long)]
    collapse_tol: Option<f64>,
    /// Write the report as JSON (`-` for standard output).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// m1, m2, probit-late, levels or continuous-logistic.
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    steps: Option<u8>,
    #[arg(long)]
    expanded: bool,
    /// Perturbation of the outcome model, e.g. `z1_offset=0.15`.
    #[arg(long, value_name = "KEY=VALUE")]
    perturb: Vec<String>,
    /// Override a design field by dotted path, e.g. `coefficients.z2=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// TOML file with the run settings; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the population decomposition of the probit design instead of simulating.
    #[arg(long)]
    population: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormArg {
    Late,
    Lrr,
    Ilrr,
}

impl From<FormArg> for DecompositionForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Late => DecompositionForm::Late,
            FormArg::Lrr => DecompositionForm::Lrr,
            FormArg::Ilrr => DecompositionForm::Ilrr,
        }
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "late")]
    form: FormArg,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DrawArgs {
    #[arg(long)]
    design: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random stream; stream r reproduces replication r of `simulate`.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    #[arg(long, value_name = "KEY=VALUE")]
    perturb: Vec<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output file (standard output when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: process exit code and a one-line message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl From<SmmError> for Failure {
    fn from(e: SmmError) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

/// 2 data or usage, 3 degenerate instrument, 4 non-convergence, 5 singular weight.
pub fn exit_code(e: &SmmError) -> u8 {
    use SmmError::*;
    match e {
        DegenerateInstrument(_) | DegenerateIncrement { .. } | RankDeficient | SaturationFailure { .. } => 3,
        NotConverged { .. } | Separation { .. } | NonFinite { .. } => 4,
        SingularWeight { .. } | SingularMatrix { .. } => 5,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Draw(a) => draw(a),
    }
}

fn fit(args: FitArgs) -> Result<(), Failure> {
    let method = Method::parse(&args.model, args.expanded)?;
    if matches!(method, Method::Decompose(_)) {
        return Err(Failure::usage(format!("`{}` is a decomposition; use `smm decompose --form`", args.model)));
    }
    let spec = EstimatorSpec::new(method, args.steps)?;
    let ds = args.data.load()?;
    let (ds, merges) = match args.collapse_tol {
        Some(tol) if tol.is_nan() || tol < 0.0 => return Err(Failure::usage("--collapse-tol must be non-negative")),
        Some(tol) => {
            let (ds, report) = collapse_equivalent_levels(&ds, ds.x(), tol)?;
            (ds, Some(report))
        }
        None => (ds, None),
    };
    let encoding = match args.encode {
        EncodeArg::Indicators => Encoding::Indicators,
        EncodeArg::Raw => Encoding::Raw,
    };
    let data = EstimationData::new(&ds, &InstrumentSpec::for_dataset(&ds, encoding))?;
    let fit = spec.fit_data(&data)?;

    let encoding_name = match encoding {
        Encoding::Indicators => "indicators",
        Encoding::Raw => "raw",
    };
    let mut prov = Provenance::new(
        Some(args.data.data.display().to_string()),
        &args.data.columns(),
        ds.n(),
        ds.dropped(),
        encoding_name,
        ds.level_values(),
    );
    if let Some(m) = &merges {
        prov = prov.with_merges(m);
    }
    let report = FitReport::new(method.name(), &fit, &data, prov);
    emit(&report, args.json.as_deref(), render::fit_table)?;
    if !fit.converged {
        return Err(Failure::new(4, format!("optimizer did not converge after {} iterations", fit.iterations)));
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let config = args.config.as_deref().map(SimConfig::from_file).transpose()?;
    let design_name = args
        .design
        .clone()
        .or_else(|| config.as_ref().map(|c| c.design.clone()))
        .ok_or_else(|| Failure::usage("--design is required (or give --config)"))?;

    let mut design = match &config {
        Some(c) if args.design.as_ref().map_or(true, |d| *d == c.design) => c.design()?,
        _ => design_by_name(&design_name)?,
    };
    design = apply_overrides(&design, &assignments(&args.perturb, Some("perturbation"))?)?;
    design = apply_overrides(&design, &assignments(&args.set, None)?)?;
    design.validate()?;

    if args.population {
        let SimDesign::ProbitLate(probit) = &design else {
            return Err(Failure::usage("--population is available for the probit-late design only"));
        };
        let d = probit_population_quantities(probit)?;
        return emit(&d, args.json.as_deref(), render::decomposition_table);
    }

    let pick = |flag: Option<usize>, from_config: Option<usize>, name: &str| {
        flag.or(from_config).ok_or_else(|| Failure::usage(format!("--{name} is required")))
    };
    let n = pick(args.n, config.as_ref().map(|c| c.n), "n")?;
    let reps = pick(args.reps, config.as_ref().map(|c| c.reps), "reps")?;
    let seed = args.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(1);
    let steps = args.steps.or(config.as_ref().map(|c| c.steps)).unwrap_or(2);
    let expanded = args.expanded || config.as_ref().is_some_and(|c| c.expanded);
    let estimator = args
        .estimator
        .clone()
        .or_else(|| config.as_ref().map(|c| c.estimator.clone()))
        .ok_or_else(|| Failure::usage("--estimator is required"))?;
    let spec = EstimatorSpec::new(Method::parse(&estimator, expanded)?, steps)?;

    let summary = match args.threads {
        Some(0) => return Err(Failure::usage("--threads must be at least 1")),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Failure::usage(e.to_string()))?
            .install(|| run_replications(&design, &spec, reps, n, seed))?,
        None => run_replications(&design, &spec, reps, n, seed)?,
    };
    emit(&summary, args.json.as_deref(), render::simulation_table)?;
    if summary.used == 0 {
        return Err(Failure::new(4, "no replication produced a usable fit"));
    }
    Ok(())
}

fn decompose_cmd(args: DecomposeArgs) -> Result<(), Failure> {
    let ds = args.data.load()?;
    let d = decompose(&ds, args.form.into())?;
    emit(&d, args.json.as_deref(), render::decomposition_table)
}

fn draw(args: DrawArgs) -> Result<(), Failure> {
    let mut design = design_by_name(&args.design)?;
    design = apply_overrides(&design, &assignments(&args.perturb, Some("perturbation"))?)?;
    design = apply_overrides(&design, &assignments(&args.set, None)?)?;
    if args.n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let ds = design.draw(args.n, &mut RngStream::new(args.seed, args.stream))?;
    let columns = Columns::default();
    match &args.out {
        Some(path) => smm_core::data::write_csv_file(&ds, path, &columns)?,
        None => write_csv(&ds, std::io::stdout().lock(), &columns)?,
    }
    Ok(())
}

fn assignments(items: &[String], prefix: Option<&str>) -> Result<Vec<(String, Value)>, Failure> {
    items
        .iter()
        .map(|item| {
            let (key, value) = parse_assignment(item)?;
            Ok((prefix.map_or(key.clone(), |p| format!("{p}.{key}")), value))
        })
        .collect()
}

/// Prints the human-readable table, or the JSON document when `json` is `-`;
/// any other `json` path receives the JSON in addition to the table.
fn emit<T: Serialize>(value: &T, json: Option<&Path>, table: fn(&T) -> String) -> Result<(), Failure> {
    let text = json
        .map(|_| serde_json::to_string_pretty(value).map(|s| s + "\n"))
        .transpose()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    let written = match (json, text) {
        (Some(p), Some(text)) if p == Path::new("-") => out.write_all(text.as_bytes()),
        (Some(p), Some(text)) => {
            std::fs::write(p, text).map_err(|source| SmmError::Io { path: p.to_path_buf(), source })?;
            out.write_all(table(value).as_bytes())
        }
        _ => out.write_all(table(value).as_bytes()),
    };
    written.map_err(|e| Failure::usage(format!("writing output: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&SmmError::InvalidInput("x".into())), 2);
        assert_eq!(exit_code(&SmmError::ColumnNotFound("y".into())), 2);
        assert_eq!(exit_code(&SmmError::DegenerateInstrument("one level".into())), 3);
        assert_eq!(exit_code(&SmmError::DegenerateIncrement { lower: 0, upper: 1, what: "E(X|Z)" }), 3);
        assert_eq!(exit_code(&SmmError::NotConverged { iterations: 5 }), 4);
        assert_eq!(exit_code(&SmmError::SingularWeight { index: 1, condition: 1e20 }), 5);
    }

    #[test]
    fn perturbation_keys_are_prefixed() {
        let a = assignments(&["z1_offset=0.15".to_string()], Some("perturbation")).unwrap();
        assert_eq!(a, vec![("perturbation.z1_offset".to_string(), Value::from(0.15))]);
    }
}
