use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rankfuse::data::{
    load_group_map, load_panel, validate_panel_for, DataError, GroupMap, OutcomeConfig,
    OutcomeSpec, PanelDataset, ValidationReport,
};
use rankfuse::descriptives::{
    describe, write_correlation_csv, write_std_diffs_csv, CorrelationMethod,
};
use rankfuse::harness::{run_robustness, summarize_table, HarnessError, RobustnessConfig};
use rankfuse::oracles::{simulate_panel, SimScenario};
use rankfuse::preprocess::{
    align_outcomes, apply_subsample, impute_state_median, plan_subsample, AlignedMatrix,
    PreprocessError, Provenance, SubsamplePlan,
};
use rankfuse::rank::{test_matrix, write_summaries_csv, Sidedness, TestResult};

#[derive(Parser)]
#[command(name = "rankfuse", version, about = "Cluster-level rank-sum test for multivariate panels")]
struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, env = "RANKFUSE_THREADS", default_value_t = 0)]
    threads: usize,

    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a panel and group map and print the validation report.
    Validate(ValidateArgs),
    /// Run the rank-sum test on a panel.
    Test(TestArgs),
    /// Repeat the test over subsample sizes and replicates.
    Robustness(RobustnessArgs),
    /// Write outcome correlations and standardized group differences.
    Describe(DescribeArgs),
    /// Generate a synthetic two-group panel.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct Inputs {
    /// County panel CSV (county_id, state_id, one column per outcome).
    #[arg(long)]
    panel: PathBuf,
    /// Group CSV (state_id, group) with group 1 = treatment, 0 = comparison.
    #[arg(long)]
    groups: PathBuf,
    /// Outcome config TOML listing `[[outcome]]` name and direction.
    #[arg(long)]
    outcomes: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Also warn about states with fewer than this many counties.
    #[arg(long)]
    counties_per_state: Option<usize>,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    /// H1: treatment states rank higher.
    Greater,
    TwoSided,
}

impl From<SideArg> for Sidedness {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Greater => Sidedness::GreaterTreat,
            SideArg::TwoSided => Sidedness::TwoSided,
        }
    }
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Subsample this many counties per state before ranking.
    #[arg(long, conflicts_with = "plan_in")]
    counties_per_state: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SideArg::Greater)]
    sidedness: SideArg,
    /// Result JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-state rank summaries CSV.
    #[arg(long)]
    summaries_out: Option<PathBuf>,
    /// Save the subsample plan as JSON.
    #[arg(long)]
    plan_out: Option<PathBuf>,
    /// Replay a saved subsample plan.
    #[arg(long)]
    plan_in: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_delimiter = ',', default_value = "30,40,50")]
    c_values: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.10")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SideArg::Greater)]
    sidedness: SideArg,
    /// Summary JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plain-text table; always echoed to stdout.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pearson,
    Spearman,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = MethodArg::Pearson)]
    method: MethodArg,
    /// Directory for correlation.csv and std_diffs.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 20)]
    m1: usize,
    #[arg(long, default_value_t = 20)]
    m0: usize,
    /// Counties per state.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Number of outcomes.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Burden reduction for group 1: one value for all outcomes or K values.
    #[arg(long, value_delimiter = ',', default_value = "0", allow_negative_numbers = true)]
    shift: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    rho_within: f64,
    #[arg(long, default_value_t = 0.0)]
    rho_outcome: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for panel.csv, groups.csv and outcomes.toml.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Failure classes, mapped to exit codes 1, 2 and 3.
enum Failure {
    Io(String),
    Invalid(String),
    Degenerate(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Degenerate(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Invalid(m) | Failure::Degenerate(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let msg = format!("{}: {e}", e.code());
        match e {
            DataError::Io(_) | DataError::Config(_) | DataError::MissingColumn(_) => {
                Failure::Io(msg)
            }
            _ => Failure::Invalid(msg),
        }
    }
}

impl From<PreprocessError> for Failure {
    fn from(e: PreprocessError) -> Self {
        let msg = format!("{}: {e}", e.code());
        match e {
            PreprocessError::PlanFormat(_) | PreprocessError::ZeroCount => Failure::Io(msg),
            _ => Failure::Invalid(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    verbose: u8,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Outcome {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

fn load_inputs(inputs: &Inputs, ctx: &Ctx) -> Result<(PanelDataset, GroupMap), Failure> {
    let config = OutcomeConfig::load(&inputs.outcomes)?;
    let panel = load_panel(&inputs.panel, &config)?;
    let (groups, issues) = load_group_map(&inputs.groups)?;
    for issue in issues {
        eprintln!("warning: {issue}");
    }
    ctx.log(format!(
        "loaded {} counties in {} states, {} outcomes",
        panel.observations().len(),
        panel.n_states(),
        panel.n_outcomes()
    ));
    Ok((panel, groups))
}

fn print_report(report: &ValidationReport) {
    for e in &report.errors {
        eprintln!("error: {e}");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn check(report: ValidationReport) -> Outcome {
    print_report(&report);
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!(
            "validation failed with {} error(s)",
            report.errors.len()
        )))
    }
}

fn cmd_validate(args: ValidateArgs, ctx: &Ctx) -> Outcome {
    let (panel, groups) = load_inputs(&args.inputs, ctx)?;
    let report = validate_panel_for(&panel, &groups, args.counties_per_state);
    print_report(&report);
    println!(
        "{} errors, {} warnings",
        report.errors.len(),
        report.warnings.len()
    );
    if let Some(path) = &args.out {
        write_file(path, to_json(&report).as_bytes())?;
    }
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure::Invalid("validation failed".into()))
    }
}

#[derive(Serialize)]
struct TestReport<'a> {
    #[serde(flatten)]
    result: &'a TestResult,
    provenance: &'a Provenance,
}

fn prepare(panel: &PanelDataset, ctx: &Ctx) -> Result<AlignedMatrix, Failure> {
    let aligned = align_outcomes(panel);
    let matrix = impute_state_median(&aligned)?;
    ctx.log(format!(
        "flipped {:?}, imputed {:?}",
        matrix.provenance.flipped, matrix.provenance.imputed
    ));
    Ok(matrix)
}

fn cmd_test(args: TestArgs, ctx: &Ctx) -> Outcome {
    let (panel, groups) = load_inputs(&args.inputs, ctx)?;
    let plan_in = match &args.plan_in {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            Some(SubsamplePlan::from_json(&text)?)
        }
        None => None,
    };
    let c = plan_in.as_ref().map(|p| p.c).or(args.counties_per_state);
    check(validate_panel_for(&panel, &groups, c))?;
    let full = prepare(&panel, ctx)?;

    let plan = match (plan_in, args.counties_per_state) {
        (Some(p), _) => Some(p),
        (None, Some(c)) => Some(plan_subsample(&full, c, args.seed)?),
        (None, None) => None,
    };
    let matrix = match &plan {
        Some(p) => {
            ctx.log(format!(
                "subsample {}: {} states retained, {} excluded",
                p.id(),
                p.retained_states.len(),
                p.excluded_states.len()
            ));
            apply_subsample(&full, p)?
        }
        None => full,
    };

    let (mut result, summaries) = test_matrix(&matrix, &groups, args.sidedness.into())
        .map_err(|e| Failure::Degenerate(format!("{}: {e}", e.code())))?;
    result.c = plan.as_ref().map(|p| p.c);

    let json = to_json(&TestReport {
        result: &result,
        provenance: &matrix.provenance,
    });
    match &args.out {
        Some(path) => write_file(path, json.as_bytes())?,
        None => print!("{json}"),
    }
    if let Some(path) = &args.summaries_out {
        let mut buf = Vec::new();
        write_summaries_csv(&summaries, &groups, &mut buf).map_err(|e| io_err(path, e))?;
        write_file(path, &buf)?;
    }
    if let (Some(path), Some(p)) = (&args.plan_out, &plan) {
        write_file(path, format!("{}\n", p.to_json()).as_bytes())?;
    }
    if args.out.is_some() {
        println!(
            "T = {:.4}, p = {:.4} ({}), m1 = {}, m0 = {}",
            result.t,
            result.p_value(),
            match result.sidedness {
                Sidedness::TwoSided => "two-sided",
                Sidedness::GreaterTreat => "one-sided",
            },
            result.m1,
            result.m0
        );
    }
    Ok(())
}

fn cmd_robustness(args: RobustnessArgs, ctx: &Ctx) -> Outcome {
    let (panel, groups) = load_inputs(&args.inputs, ctx)?;
    let cfg = RobustnessConfig {
        c_values: args.c_values,
        replicates: args.replicates,
        alpha_levels: args.alpha,
        master_seed: args.seed,
        sidedness: args.sidedness.into(),
    };
    let run = match run_robustness(&panel, &groups, &cfg) {
        Ok(run) => run,
        Err(HarnessError::Invalid(report)) => return check(report),
        Err(HarnessError::Config(m)) => return Err(Failure::Io(m)),
        Err(HarnessError::Preprocess(e)) => return Err(e.into()),
    };
    for (c, s) in &run.summary.per_c {
        if let Some(err) = &s.error {
            eprintln!("warning: C = {c}: {err}");
        }
    }
    let mut table = summarize_table(&run.summary).join("\n");
    table.push('\n');
    if let Some(path) = &args.out {
        write_file(path, format!("{}\n", run.summary.to_json()).as_bytes())?;
    }
    if let Some(path) = &args.table {
        write_file(path, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_describe(args: DescribeArgs, ctx: &Ctx) -> Outcome {
    let (panel, groups) = load_inputs(&args.inputs, ctx)?;
    check(validate_panel_for(&panel, &groups, None))?;
    let matrix = prepare(&panel, ctx)?;
    let method = match args.method {
        MethodArg::Pearson => CorrelationMethod::Pearson,
        MethodArg::Spearman => CorrelationMethod::Spearman,
    };
    let summary = describe(&matrix, &groups, method).map_err(|e| Failure::Invalid(e.to_string()))?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut corr = Vec::new();
    write_correlation_csv(&summary.correlation, &mut corr).map_err(|e| io_err(dir, e))?;
    let mut diffs = Vec::new();
    write_std_diffs_csv(&summary.std_diffs, &mut diffs).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join("correlation.csv"), &corr)?;
    write_file(&dir.join("std_diffs.csv"), &diffs)?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, ctx: &Ctx) -> Outcome {
    let shift = match args.shift.as_slice() {
        [s] => vec![*s; args.k],
        many => many.to_vec(),
    };
    let scenario = SimScenario::new(
        args.m1,
        args.m0,
        args.n,
        args.k,
        args.rho_within,
        args.rho_outcome,
        shift,
        args.seed,
    )
    .map_err(|e| Failure::Io(e.to_string()))?;
    let (matrix, groups) = simulate_panel(&scenario).map_err(|e| Failure::Io(e.to_string()))?;
    let panel = matrix_to_panel(&matrix)?;

    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut buf = Vec::new();
    rankfuse::data::write_panel(&panel, &mut buf)?;
    write_file(&dir.join("panel.csv"), &buf)?;
    let mut buf = Vec::new();
    groups.write_csv(&mut buf)?;
    write_file(&dir.join("groups.csv"), &buf)?;
    let config = OutcomeConfig::new(panel.outcomes().to_vec())?;
    write_file(&dir.join("outcomes.toml"), config.to_toml_string().as_bytes())?;
    ctx.log(format!(
        "wrote {} counties to {}",
        matrix.n_rows(),
        dir.display()
    ));
    Ok(())
}

fn matrix_to_panel(matrix: &AlignedMatrix) -> Result<PanelDataset, Failure> {
    let outcomes: Vec<OutcomeSpec> = matrix.outcomes().to_vec();
    let obs = matrix
        .rows()
        .iter()
        .map(|r| rankfuse::data::CountyObservation {
            county_id: r.county_id.clone(),
            state_id: r.state_id.clone(),
            values: r.values.iter().map(|v| Some(*v)).collect(),
        })
        .collect();
    Ok(PanelDataset::new(outcomes, obs)?)
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx {
        verbose: cli.verbose,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Io(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Validate(a) => cmd_validate(a, &ctx),
        Command::Test(a) => cmd_test(a, &ctx),
        Command::Robustness(a) => cmd_robustness(a, &ctx),
        Command::Describe(a) => cmd_describe(a, &ctx),
        Command::Simulate(a) => cmd_simulate(a, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let _ = std::io::stdout().flush();
            eprintln!("rankfuse: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
