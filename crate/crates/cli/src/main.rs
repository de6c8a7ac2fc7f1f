use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use swcrt::datagen::simulate_dataset;
use swcrt::estimator::FitOptions;
use swcrt::harness::{self, RunOptions, Scenario};
use swcrt::inference::{self, MdForm, RegressionReport};
use swcrt::io::{self, PeriodCalendar, TimeMode};
use swcrt::streams::replicate_seed;
use swcrt::{fit_ml, Dataset, EffectKind, Error, Structure, VcovKind, WorkingModel};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_FIT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "swcrt",
    version,
    about = "Stepped wedge trials with continuous recruitment: simulate and analyse"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo harness for one scenario
    Simulate(SimulateArgs),
    /// Write one simulated trial as CSV
    Generate(GenerateArgs),
    /// Fit working models to a trial CSV and report effect estimates
    Analyze(AnalyzeArgs),
    /// Regress cluster-period sizes on treatment and exposure time
    CheckRecruitment(CheckArgs),
    /// Render summary tables from replicate CSVs written by `simulate`
    Report(ReportArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Catalog scenario (1-24)
    #[arg(long, conflicts_with = "config")]
    scenario: Option<usize>,
    /// key = value scenario file
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<Scenario, Error> {
        match (&self.scenario, &self.config) {
            (Some(id), None) => Scenario::catalog(*id),
            (None, Some(path)) => harness::parse_config_file(path),
            _ => Err(Error::Config("give either --scenario or --config".into())),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = harness::DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replicate index within the seed
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimeModeArg {
    Fractional,
    Absolute,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fractional")]
    time_mode: TimeModeArg,
    /// Absolute mode: length of every period
    #[arg(long)]
    period_length: Option<f64>,
    /// Absolute mode: calendar time at the start of period 1
    #[arg(long, default_value_t = 0.0)]
    origin: f64,
    /// Absolute mode: comma-separated period boundaries b0,b1,...,bJ
    #[arg(long, value_delimiter = ',', conflicts_with = "period_length")]
    boundaries: Option<Vec<f64>>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, Error> {
        let mode = match self.time_mode {
            TimeModeArg::Fractional => TimeMode::Fractional,
            TimeModeArg::Absolute => match (&self.boundaries, self.period_length) {
                (Some(b), None) => TimeMode::Absolute(PeriodCalendar::Boundaries(b.clone())),
                (None, Some(length)) => TimeMode::Absolute(PeriodCalendar::Equal {
                    origin: self.origin,
                    length,
                }),
                _ => {
                    return Err(Error::Config(
                        "absolute times need --period-length or --boundaries".into(),
                    ))
                }
            },
        };
        io::read_dataset_file(&self.data, &mode)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EffectArg {
    Constant,
    Exposure,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MdFormArg {
    Inverse,
    Literal,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Working structures, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "exch,ne,dtd")]
    structure: Vec<String>,
    #[arg(long, value_enum, default_value = "constant")]
    effect: EffectArg,
    /// Variance estimators, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "model,cr0,md")]
    variance: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// MD leverage adjustment
    #[arg(long, value_enum, default_value = "inverse")]
    md_form: MdFormArg,
    /// Also test equality of the exposure-time effects
    #[arg(long)]
    lrt: bool,
    /// Restricted maximum likelihood
    #[arg(long)]
    reml: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `simulate`
    #[arg(long = "in")]
    input: PathBuf,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Design(_) => "design",
        Error::OutOfRange(_) => "out_of_range",
        Error::Recruitment(_) => "recruitment",
        Error::Parameter(_) => "parameter",
        Error::NotPositiveDefinite { .. } => "not_positive_definite",
        Error::RankDeficient { .. } => "rank_deficient",
        Error::SingularLeverage { .. } => "singular_leverage",
        Error::Fit(_) => "fit",
        Error::Inference(_) => "inference",
        Error::Validation(_) => "validation",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() || matches!(e, Error::Io(_)) {
        EXIT_DATA
    } else {
        EXIT_FIT
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string(), EXIT_USAGE),
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate(a),
        Command::Analyze(a) => analyze(a),
        Command::CheckRecruitment(a) => check_recruitment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), e.to_string(), exit_code(&e)),
    }
}

fn simulate(a: SimulateArgs) -> Result<String, Error> {
    let scenario = a.scenario.resolve()?;
    let opts = RunOptions {
        n_reps: a.reps,
        base_seed: a.seed,
        threads: a.threads,
        fit: FitOptions::default(),
    };
    let run = harness::run_scenario(&scenario, &opts)?;
    std::fs::create_dir_all(&a.out)?;
    let stem = &scenario.name;
    let summaries = run.summaries()?;
    harness::write_replicates_csv(&a.out.join(format!("{stem}_replicates.csv")), &run.rows)?;
    harness::write_failures_csv(&a.out.join(format!("{stem}_failures.csv")), &run.failures)?;
    harness::write_summary_csv(&a.out.join(format!("{stem}_summary.csv")), &summaries)?;
    let mut md = format!(
        "{}\n\nreplicates: {}, seed: {}\n\n",
        scenario.describe(),
        a.reps,
        a.seed
    );
    md.push_str(&harness::summary_markdown(&summaries));
    std::fs::write(a.out.join(format!("{stem}_summary.md")), &md)?;
    Ok(md)
}

fn generate(a: GenerateArgs) -> Result<String, Error> {
    let scenario = a.scenario.resolve()?;
    scenario.validate()?;
    let seed = replicate_seed(a.seed, a.replicate);
    let ds = simulate_dataset(
        &scenario.design()?,
        &scenario.plan()?,
        &scenario.generative()?,
        seed,
    )?;
    io::write_dataset_file(&a.out, &ds)?;
    Ok(format!(
        "wrote {} records ({} clusters, {} periods) to {}\n",
        ds.len(),
        ds.design.n_clusters(),
        ds.design.n_periods(),
        a.out.display()
    ))
}

fn inference_row(out: &mut String, label: &str, kind: VcovKind, e: &inference::EffectInference) {
    let _ = writeln!(
        out,
        "  {label:<10} {:<6} {:>10.4} {:>9.4} ({:.4}, {:.4})  p = {:.4}",
        kind.label(),
        e.estimate,
        e.se,
        e.ci_low,
        e.ci_high,
        e.p_value
    );
}

fn analyze(a: AnalyzeArgs) -> Result<String, Error> {
    let ds = a.data.load()?;
    let structures: Vec<Structure> = a
        .structure
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    let kinds: Vec<VcovKind> = a
        .variance
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    let effect = match a.effect {
        EffectArg::Constant => EffectKind::Constant,
        EffectArg::Exposure => EffectKind::ExposureDependent,
    };
    let md_form = if a.md_form == MdFormArg::Literal {
        MdForm::Literal
    } else {
        MdForm::Inverse
    };
    let opts = FitOptions {
        reml: a.reml,
        ..FitOptions::default()
    };
    let level = a.level;

    let mut out = format!(
        "{} records, {} clusters, {} periods; t inference on {} degrees of freedom\n",
        ds.len(),
        ds.design.n_clusters(),
        ds.design.n_periods(),
        ds.design.n_clusters().saturating_sub(2)
    );
    for &structure in &structures {
        let fit = fit_ml(&ds, WorkingModel::new(structure, effect)?, &opts)?;
        let _ = writeln!(
            out,
            "\n{structure}: loglik {:.4}, converged {}{}",
            fit.loglik,
            fit.converged,
            if fit.at_boundary {
                ", variance component at boundary"
            } else {
                ""
            }
        );
        let _ = writeln!(
            out,
            "  {:<10} {:<6} {:>10} {:>9} CI",
            "estimand", "vcov", "estimate", "se"
        );
        for &kind in &kinds {
            let v = match kind {
                VcovKind::Md => inference::sandwich_md(&fit, md_form)?,
                _ => inference::vcov(&fit, kind)?,
            };
            match effect {
                EffectKind::Constant => inference_row(
                    &mut out,
                    "delta",
                    kind,
                    &inference::effect_with_vcov(&fit, &v, level)?,
                ),
                EffectKind::ExposureDependent => {
                    inference_row(
                        &mut out,
                        "Delta",
                        kind,
                        &inference::average_effect(&fit, &v, level)?,
                    );
                    for (name, e) in inference::exposure_effects(&fit, &v, level)? {
                        let label = format!("delta({})", name.trim_start_matches("exposure"));
                        inference_row(&mut out, &label, kind, &e);
                    }
                }
            }
        }
        if a.lrt {
            let l = inference::lrt_exposure_heterogeneity(&ds, structure, &opts)?;
            let _ = writeln!(
                out,
                "  LRT equal exposure effects: chi2 = {:.4} on {} df, p = {:.4}",
                l.statistic, l.dof, l.p_value
            );
        }
    }
    Ok(out)
}

fn regression_block(out: &mut String, title: &str, r: &RegressionReport) {
    let _ = writeln!(
        out,
        "{title} (residual df {}, residual variance {:.4})",
        r.dof, r.residual_variance
    );
    let _ = writeln!(
        out,
        "  {:<12} {:>12} {:>10} {:>9} {:>8}",
        "term", "estimate", "se", "t", "p"
    );
    for t in &r.terms {
        let _ = writeln!(
            out,
            "  {:<12} {:>12.4} {:>10.4} {:>9.3} {:>8.4}",
            t.name, t.estimate, t.se, t.t, t.p_value
        );
    }
}

fn check_recruitment(a: CheckArgs) -> Result<String, Error> {
    let ds = a.data.load()?;
    let check = inference::recruitment_dependence_check(&ds)?;
    let mut out = String::new();
    regression_block(
        &mut out,
        "size ~ period + treatment",
        &check.treatment_model,
    );
    out.push('\n');
    regression_block(&mut out, "size ~ period + exposure", &check.exposure_model);
    let t = check
        .treatment_model
        .term("treatment")
        .expect("treatment term");
    let _ = writeln!(
        out,
        "\ntreatment coefficient {:.4}, p = {:.4}: {}",
        t.estimate,
        t.p_value,
        if t.p_value > 0.05 {
            "no strong evidence that cluster-period sizes depend on treatment"
        } else {
            "cluster-period sizes appear to depend on treatment"
        }
    );
    Ok(out)
}

fn report(a: ReportArgs) -> Result<String, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("_replicates.csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no *_replicates.csv files in {}",
            a.input.display()
        )));
    }
    let mut summaries = Vec::new();
    for f in &files {
        let rows = harness::read_replicates_csv(f)?;
        let failed = count_failures(f)?;
        let mut estimands: Vec<String> = Vec::new();
        for r in &rows {
            if !estimands.contains(&r.estimand) {
                estimands.push(r.estimand.clone());
            }
        }
        for e in estimands {
            let of: Vec<_> = rows.iter().filter(|r| r.estimand == e).cloned().collect();
            let mut s = harness::summarize(&of, of[0].truth)?;
            s.n_reps += failed;
            s.n_failed = failed;
            summaries.push(s);
        }
    }
    Ok(harness::summary_markdown(&summaries))
}

fn count_failures(replicates: &Path) -> Result<usize, Error> {
    let name = replicates
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let path = replicates.with_file_name(name.replace("_replicates.csv", "_failures.csv"));
    if !path.exists() {
        return Ok(0);
    }
    Ok(harness::read_failures_csv(&path)?.len())
}
