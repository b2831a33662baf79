//! `shrinkfuse` command-line interface.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid input or usage,
//! 3 result written but the search did not converge.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use shrinkfuse::causal::{
    build_fusion_input, ensure_propensities, read_csv_path, Adjustment, PropensityMode,
    StratifiedDataset, StudyRole, VarianceNormalization,
};
use shrinkfuse::sensitivity::{
    implied_gamma, lambda_of_gamma, ImpliedGammaResult, SearchStatus, SensitivityConfig,
    SensitivityReport,
};
use shrinkfuse::shrinkage::{
    check_dominance_conditions, estimate, A2Form, BiasWeighting, EstimateOptions,
};
use shrinkfuse::simulation::{paper_conditions, run_condition, RiskTable, SimConfig, StrataScheme};
use shrinkfuse::{EstimatorId, FusionInput, OracleSpec, ShrinkageOutput};

const DEFAULT_SEED: u64 = 2020;

#[derive(Parser, Debug)]
#[command(
    name = "shrinkfuse",
    version,
    about = "Shrinkage fusion of experimental and observational effect estimates"
)]
struct Cli {
    /// Seed for every random draw. Defaults to a fixed constant.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (directory for `simulate`). Writes to stdout when omitted.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Shrinkage estimates from a fusion input JSON file.
    Estimate(EstimateArgs),
    /// End to end: unit-level CSVs to fused estimates and dominance checks.
    Fuse(FuseArgs),
    /// Worst-case bounds at one Γ, or the implied Γ of the data-driven estimate.
    Sensitivity(SensitivityArgs),
    /// Monte Carlo risk study.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
struct EstimatorOpts {
    /// Comma-separated estimator ids. Defaults to every id except `oracle`.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    #[arg(long, value_enum, default_value_t = A2FormArg::Printed)]
    a2_form: A2FormArg,
    /// Green–Strawderman shrinkage constant; K - 2 when omitted.
    #[arg(long)]
    gs_a: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum A2FormArg {
    Printed,
    UreMinimizer,
}

impl From<A2FormArg> for A2Form {
    fn from(a: A2FormArg) -> Self {
        match a {
            A2FormArg::Printed => A2Form::Printed,
            A2FormArg::UreMinimizer => A2Form::UreMinimizer,
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Fusion input JSON with keys tau_r, tau_o, sigma_r2, d and optional sigma_o2.
    #[arg(long, short, required_unless_present = "list_estimators")]
    input: Option<PathBuf>,
    /// JSON with keys xi and sigma_o2; required for `oracle`.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Print the estimator ids and exit.
    #[arg(long)]
    list_estimators: bool,
    #[command(flatten)]
    est: EstimatorOpts,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
enum AdjustmentArg {
    None,
    Sipw,
}

impl From<AdjustmentArg> for Adjustment {
    fn from(a: AdjustmentArg) -> Self {
        match a {
            AdjustmentArg::None => Adjustment::None,
            AdjustmentArg::Sipw => Adjustment::Sipw,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PropensityArg {
    Shared,
    PerStratum,
}

impl From<PropensityArg> for PropensityMode {
    fn from(a: PropensityArg) -> Self {
        match a {
            PropensityArg::Shared => PropensityMode::Shared,
            PropensityArg::PerStratum => PropensityMode::PerStratum,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormalizationArg {
    Population,
    Sample,
}

impl From<NormalizationArg> for VarianceNormalization {
    fn from(a: NormalizationArg) -> Self {
        match a {
            NormalizationArg::Population => VarianceNormalization::Population,
            NormalizationArg::Sample => VarianceNormalization::Sample,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Observational CSV: y, w, stratum, optional x1..xp and p_hat.
    #[arg(long)]
    obs: PathBuf,
    /// RCT CSV with the same columns.
    #[arg(long)]
    rct: PathBuf,
    #[arg(long, value_enum, default_value_t = PropensityArg::Shared)]
    propensity_mode: PropensityArg,
    #[arg(long, value_enum, default_value_t = NormalizationArg::Population)]
    variance_normalization: NormalizationArg,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = AdjustmentArg::None)]
    adjustment: AdjustmentArg,
    #[command(flatten)]
    est: EstimatorOpts,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Report worst-case bounds at this Γ.
    #[arg(long, conflicts_with = "implied", required_unless_present = "implied")]
    gamma: Option<f64>,
    /// Search for the Γ whose λ(Γ) matches the corrected common-factor estimate.
    #[arg(long)]
    implied: bool,
    /// Estimator for the observational effect in the fusion input.
    #[arg(long, value_enum, default_value_t = AdjustmentArg::Sipw)]
    adjustment: AdjustmentArg,
    #[arg(long, default_value_t = 200)]
    bootstrap_b: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 16.0)]
    gamma_max: f64,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
    /// Resample treated and control units separately in the bootstrap.
    #[arg(long)]
    arm_stratified: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
enum SchemeArg {
    Similar,
    Variable,
}

impl From<SchemeArg> for StrataScheme {
    fn from(a: SchemeArg) -> Self {
        match a {
            SchemeArg::Similar => StrataScheme::Similar,
            SchemeArg::Variable => StrataScheme::Variable,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Base condition as JSON, or TOML when the file ends in `.toml`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the full grid at full scale.
    #[arg(long, conflicts_with = "quick")]
    paper: bool,
    /// Run the full grid at reduced scale (2000/400 units, 10 by 10 replicates).
    #[arg(long)]
    quick: bool,
    /// Keep only these stratum counts.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum)]
    scheme: Vec<SchemeArg>,
    /// Keep only these covariate-shift settings.
    #[arg(long, value_delimiter = ',')]
    shift: Vec<bool>,
    #[arg(long, value_delimiter = ',', value_enum)]
    adjustment: Vec<AdjustmentArg>,
}

/// Provenance record written beside every output.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    seed: u64,
    tool_version: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    duration_secs: f64,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let missing_file = |e: &io::Error| e.kind() == io::ErrorKind::NotFound;
        let code = match error.downcast_ref::<shrinkfuse::Error>() {
            Some(shrinkfuse::Error::Io(e)) if missing_file(e) => 2,
            Some(e) if e.is_user_error() => 2,
            Some(_) => 1,
            None => match error.downcast_ref::<io::Error>() {
                Some(e) if missing_file(e) => 2,
                _ => 1,
            },
        };
        Failure { code, error }
    }
}

fn user_error(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        error: anyhow!("{msg}"),
    }
}

type CliResult<T> = Result<T, Failure>;

struct Session {
    seed: u64,
    output: Option<PathBuf>,
    format: Format,
    started: Instant,
}

impl Session {
    /// Writes `body` to the output file with a manifest, or to stdout.
    fn emit(
        &self,
        command: &str,
        config: Value,
        inputs: Vec<PathBuf>,
        body: &str,
    ) -> CliResult<()> {
        match &self.output {
            None => {
                let mut out = io::stdout().lock();
                out.write_all(body.as_bytes())?;
                if !body.ends_with('\n') {
                    out.write_all(b"\n")?;
                }
            }
            Some(path) => {
                fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
                self.manifest(
                    command,
                    config,
                    inputs,
                    vec![path.clone()],
                    &manifest_path(path),
                )?;
            }
        }
        Ok(())
    }

    fn manifest(
        &self,
        command: &str,
        config: Value,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        at: &Path,
    ) -> CliResult<()> {
        let m = RunManifest {
            command: command.to_string(),
            config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            inputs,
            outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        fs::write(at, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", at.display()))?;
        Ok(())
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn parse_ids(raw: &[String], default: &[EstimatorId]) -> CliResult<Vec<EstimatorId>> {
    if raw.is_empty() {
        return Ok(default.to_vec());
    }
    raw.iter()
        .map(|s| s.parse::<EstimatorId>().map_err(user_error))
        .collect()
}

fn default_ids() -> Vec<EstimatorId> {
    EstimatorId::ALL
        .into_iter()
        .filter(|&id| id != EstimatorId::Oracle)
        .collect()
}

#[derive(Serialize)]
struct NamedOutput<'a> {
    id: &'a str,
    #[serde(flatten)]
    output: &'a ShrinkageOutput,
}

fn run_estimators(
    input: &FusionInput,
    ids: &[EstimatorId],
    oracle: Option<&OracleSpec>,
    opts: &EstimatorOpts,
) -> CliResult<Vec<(EstimatorId, ShrinkageOutput)>> {
    let o = EstimateOptions {
        a2_form: opts.a2_form.into(),
        bias_weighting: BiasWeighting::Loss,
        gs_a: opts.gs_a,
    };
    ids.iter()
        .map(|&id| Ok((id, estimate(id, input, oracle, &o)?)))
        .collect()
}

fn estimates_csv(results: &[(EstimatorId, ShrinkageOutput)]) -> String {
    let mut s = String::from("estimator,k,estimate,factor\n");
    for (id, out) in results {
        for (k, (e, f)) in out.estimate.iter().zip(&out.factors).enumerate() {
            s.push_str(&format!("{id},{k},{e},{f}\n"));
        }
    }
    s
}

fn estimates_json(results: &[(EstimatorId, ShrinkageOutput)]) -> Value {
    Value::Array(
        results
            .iter()
            .map(|(id, o)| {
                serde_json::to_value(NamedOutput {
                    id: id.as_str(),
                    output: o,
                })
                .unwrap_or(Value::Null)
            })
            .collect(),
    )
}

fn cmd_estimate(ctx: &Session, args: &EstimateArgs) -> CliResult<u8> {
    if args.list_estimators {
        let mut out = io::stdout().lock();
        for id in EstimatorId::ALL {
            writeln!(out, "{id}")?;
        }
        return Ok(0);
    }
    let path = args
        .input
        .as_ref()
        .ok_or_else(|| user_error("--input is required"))?;
    let input = FusionInput::from_json_file(path)
        .map_err(Failure::from)
        .map_err(|f| Failure {
            code: f.code,
            error: f.error.context(format!("reading {}", path.display())),
        })?;
    let oracle = match &args.oracle {
        Some(p) => Some(read_oracle(p)?),
        None => None,
    };
    let defaults = if oracle.is_some() {
        EstimatorId::ALL.to_vec()
    } else {
        default_ids()
    };
    let ids = parse_ids(&args.est.estimators, &defaults)?;
    let results = run_estimators(&input, &ids, oracle.as_ref(), &args.est)?;
    let body = match ctx.format {
        Format::Csv => estimates_csv(&results),
        Format::Json => serde_json::to_string_pretty(&estimates_json(&results))?,
    };
    let mut inputs = vec![path.clone()];
    inputs.extend(args.oracle.clone());
    let config = json!({
        "estimators": ids.iter().map(|i| i.as_str()).collect::<Vec<_>>(),
        "a2_form": A2Form::from(args.est.a2_form),
        "gs_a": args.est.gs_a,
        "format": ctx.format,
    });
    ctx.emit("estimate", config, inputs, &body)?;
    Ok(0)
}

fn read_oracle(path: &Path) -> CliResult<OracleSpec> {
    #[derive(serde::Deserialize)]
    struct Raw {
        xi: Vec<f64>,
        sigma_o2: Vec<f64>,
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: Raw =
        serde_json::from_str(&text).map_err(|e| user_error(format!("{}: {e}", path.display())))?;
    Ok(OracleSpec::new(raw.xi, raw.sigma_o2)?)
}

fn load_data(
    data: &DataArgs,
    needs_propensity: bool,
) -> CliResult<(StratifiedDataset, StratifiedDataset)> {
    let read = |p: &Path, role| {
        read_csv_path(p, role, None)
            .map_err(Failure::from)
            .map_err(|f| Failure {
                code: f.code,
                error: f.error.context(format!("reading {}", p.display())),
            })
    };
    let obs = read(&data.obs, StudyRole::Observational)?;
    let rct = read(&data.rct, StudyRole::Randomized)?;
    if obs.k != rct.k {
        return Err(user_error(format!(
            "stratum counts differ: observational data has {} strata, RCT data has {}",
            obs.k, rct.k
        )));
    }
    let obs = if needs_propensity {
        ensure_propensities(obs, data.propensity_mode.into())?
    } else {
        obs
    };
    Ok((obs, rct))
}

fn cmd_fuse(ctx: &Session, args: &FuseArgs) -> CliResult<u8> {
    let ids = parse_ids(&args.est.estimators, &default_ids())?;
    if ids.contains(&EstimatorId::Oracle) {
        return Err(user_error(
            "the oracle estimator needs the true bias and is unavailable in fuse",
        ));
    }
    let adjustment: Adjustment = args.adjustment.into();
    let (obs, rct) = load_data(&args.data, adjustment == Adjustment::Sipw)?;
    let input = build_fusion_input(
        &obs,
        &rct,
        adjustment,
        args.data.variance_normalization.into(),
    )?;
    let results = run_estimators(&input, &ids, None, &args.est)?;
    let dominance = check_dominance_conditions(&input.sigma_r2, &input.weights)?;
    let body = match ctx.format {
        Format::Csv => estimates_csv(&results),
        Format::Json => serde_json::to_string_pretty(&json!({
            "input": input,
            "estimates": estimates_json(&results),
            "dominance": dominance,
        }))?,
    };
    let config = json!({
        "estimators": ids.iter().map(|i| i.as_str()).collect::<Vec<_>>(),
        "adjustment": adjustment,
        "propensity_mode": PropensityMode::from(args.data.propensity_mode),
        "variance_normalization": VarianceNormalization::from(args.data.variance_normalization),
        "a2_form": A2Form::from(args.est.a2_form),
        "gs_a": args.est.gs_a,
        "format": ctx.format,
    });
    ctx.emit(
        "fuse",
        config,
        vec![args.data.obs.clone(), args.data.rct.clone()],
        &body,
    )?;
    Ok(0)
}

fn report_csv(r: &SensitivityReport) -> String {
    let mut s = String::from("stratum,point,lower,upper,bias_l,bias_r,var_l,var_r,combined\n");
    for (k, x) in r.strata.iter().enumerate() {
        s.push_str(&format!(
            "{k},{},{},{},{},{},{},{},{}\n",
            x.point, x.lower, x.upper, x.bias_l, x.bias_r, x.var_l, x.var_r, x.combined
        ));
    }
    s
}

fn implied_csv(r: &ImpliedGammaResult) -> String {
    let status = serde_json::to_value(r.status)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    format!(
        "gamma_imp,lambda_target,lambda_at_gamma,iterations,converged,status\n{},{},{},{},{},{}\n",
        r.gamma_imp, r.lambda_target, r.lambda_at_gamma, r.iterations, r.converged, status
    )
}

fn cmd_sensitivity(ctx: &Session, args: &SensitivityArgs) -> CliResult<u8> {
    let config = SensitivityConfig {
        gamma: args.gamma.unwrap_or(1.0),
        bootstrap_b: args.bootstrap_b,
        seed: ctx.seed,
        epsilon: args.epsilon,
        gamma_max: args.gamma_max,
        max_iterations: args.max_iterations,
        arm_stratified: args.arm_stratified,
        bias_weighting: BiasWeighting::Loss,
    };
    config.validate()?;
    let (obs, rct) = load_data(&args.data, true)?;
    let input = build_fusion_input(
        &obs,
        &rct,
        args.adjustment.into(),
        args.data.variance_normalization.into(),
    )?;
    let inputs = vec![args.data.obs.clone(), args.data.rct.clone()];
    let mut resolved = serde_json::to_value(config)?;
    resolved["mode"] = json!(if args.implied { "implied" } else { "at-gamma" });
    resolved["adjustment"] = json!(Adjustment::from(args.adjustment));
    resolved["format"] = json!(ctx.format);

    if args.implied {
        let result = implied_gamma(&obs, &input, &config)?;
        let body = match ctx.format {
            Format::Csv => implied_csv(&result),
            Format::Json => serde_json::to_string_pretty(&result)?,
        };
        ctx.emit("sensitivity", resolved, inputs, &body)?;
        if result.status != SearchStatus::Converged {
            eprintln!(
                "warning: implied-gamma search did not converge ({:?}); result written with converged=false",
                result.status
            );
            return Ok(3);
        }
        return Ok(0);
    }
    let report = lambda_of_gamma(&obs, &input, &config)?;
    let body = match ctx.format {
        Format::Csv => report_csv(&report),
        Format::Json => serde_json::to_string_pretty(&report)?,
    };
    ctx.emit("sensitivity", resolved, inputs, &body)?;
    Ok(0)
}

fn simulation_grid(
    ctx: &Session,
    args: &SimulateArgs,
    explicit_seed: Option<u64>,
) -> CliResult<Vec<SimConfig>> {
    let base = match &args.config {
        Some(p) => SimConfig::from_path(p)
            .map_err(Failure::from)
            .map_err(|f| Failure {
                code: f.code,
                error: f.error.context(format!("reading {}", p.display())),
            })?,
        None => SimConfig {
            seed: ctx.seed,
            ..SimConfig::default()
        },
    };
    let seed = explicit_seed.unwrap_or(base.seed);
    let mut grid: Vec<SimConfig> = if args.paper || args.quick {
        paper_conditions(seed)
            .into_iter()
            .map(|c| SimConfig {
                k: c.k,
                strata_scheme: c.strata_scheme,
                covariate_shift: c.covariate_shift,
                adjustment: c.adjustment,
                seed,
                ..base.clone()
            })
            .map(|c| if args.quick { c.quick() } else { c })
            .collect()
    } else {
        let mut single = vec![SimConfig {
            seed,
            ..base.clone()
        }];
        // Selectors on a single condition expand it into the listed values.
        if !args.k.is_empty() {
            single = single
                .iter()
                .flat_map(|c| args.k.iter().map(move |&k| SimConfig { k, ..c.clone() }))
                .collect();
        }
        if !args.scheme.is_empty() {
            single = single
                .iter()
                .flat_map(|c| {
                    args.scheme.iter().map(move |&s| SimConfig {
                        strata_scheme: s.into(),
                        ..c.clone()
                    })
                })
                .collect();
        }
        if !args.shift.is_empty() {
            single = single
                .iter()
                .flat_map(|c| {
                    args.shift.iter().map(move |&s| SimConfig {
                        covariate_shift: s,
                        ..c.clone()
                    })
                })
                .collect();
        }
        if !args.adjustment.is_empty() {
            single = single
                .iter()
                .flat_map(|c| {
                    args.adjustment.iter().map(move |&a| SimConfig {
                        adjustment: a.into(),
                        ..c.clone()
                    })
                })
                .collect();
        }
        return validate_grid(single);
    };
    if !args.k.is_empty() {
        if let Some(bad) = args.k.iter().find(|k| ![6, 20].contains(*k)) {
            return Err(user_error(format!(
                "--k {bad} is not in the preset grid (6, 20)"
            )));
        }
        grid.retain(|c| args.k.contains(&c.k));
    }
    if !args.scheme.is_empty() {
        grid.retain(|c| {
            args.scheme
                .iter()
                .any(|&s| StrataScheme::from(s) == c.strata_scheme)
        });
    }
    if !args.shift.is_empty() {
        grid.retain(|c| args.shift.contains(&c.covariate_shift));
    }
    if !args.adjustment.is_empty() {
        grid.retain(|c| {
            args.adjustment
                .iter()
                .any(|&a| Adjustment::from(a) == c.adjustment)
        });
    }
    validate_grid(grid)
}

fn validate_grid(grid: Vec<SimConfig>) -> CliResult<Vec<SimConfig>> {
    if grid.is_empty() {
        return Err(user_error("the condition selectors match no conditions"));
    }
    for c in &grid {
        c.validate()
            .map_err(|e| user_error(format!("condition {}: {e}", c.label())))?;
    }
    Ok(grid)
}

fn cmd_simulate(ctx: &Session, args: &SimulateArgs, explicit_seed: Option<u64>) -> CliResult<u8> {
    let grid = simulation_grid(ctx, args, explicit_seed)?;
    let dir = ctx
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("simulation-output"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let inputs: Vec<PathBuf> = args.config.iter().cloned().collect();
    for config in &grid {
        let started = Instant::now();
        log::info!("running {}", config.label());
        let table: RiskTable = run_condition(config)?;
        let label = table.label.clone();
        let (main, body) = match ctx.format {
            Format::Csv => {
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                (dir.join(format!("{label}.csv")), buf)
            }
            Format::Json => (
                dir.join(format!("{label}.risk.json")),
                serde_json::to_vec_pretty(&table.rows)?,
            ),
        };
        fs::write(&main, body).with_context(|| format!("writing {}", main.display()))?;
        let sidecar = dir.join(format!("{label}.json"));
        fs::write(&sidecar, table.sidecar_json()? + "\n")
            .with_context(|| format!("writing {}", sidecar.display()))?;
        let cond_ctx = Session {
            seed: config.seed,
            output: None,
            format: ctx.format,
            started,
        };
        cond_ctx.manifest(
            "simulate",
            serde_json::to_value(config)?,
            inputs.clone(),
            vec![main.clone(), sidecar],
            &dir.join(format!("{label}.manifest.json")),
        )?;
        println!("{}", summary_line(&table));
    }
    Ok(0)
}

fn summary_line(t: &RiskTable) -> String {
    let parts: Vec<String> = t
        .rows
        .iter()
        .filter(|r| r.name != "tau_r")
        .map(|r| format!("{} {:+.2}%", r.name, r.pct_reduction))
        .collect();
    format!("{}: {}", t.label, parts.join(", "))
}

fn run(cli: Cli) -> CliResult<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(user_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let ctx = Session {
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        output: cli.output.clone(),
        format: cli.format,
        started: Instant::now(),
    };
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(&ctx, a),
        Command::Fuse(a) => cmd_fuse(&ctx, a),
        Command::Sensitivity(a) => cmd_sensitivity(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
