use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use chronofit::basis::Difference;
use chronofit::data::LongDataset;
use chronofit::harness::{
    acf, appendix_demo, fit_variant, fit_with_bug, run_study, AppendixConfig, GeneratorKind,
    ModelVariant, StudyConfig, VariantOptions,
};
use chronofit::model::FitOptions;
use chronofit::report::{fit_report, study_table, write_acf_csv, write_study_csv};
use chronofit::sim::{simulate, Design, SimParams, TimeEffect};

/// Penalized-spline mixed models and simulation studies of time-varying
/// subject effects.
#[derive(Parser, Debug)]
#[command(name = "chronofit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset and write it as CSV.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Fit one model variant to a dataset.
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Replicated power study.
    #[command(args_override_self = true)]
    Power(StudyArgs),
    /// Replicated Type-I study: all treatment effects set to zero.
    #[command(args_override_self = true)]
    Type1(StudyArgs),
    /// Independent versus correlated random intercepts and slopes on a
    /// shifted covariate.
    #[command(args_override_self = true)]
    AppendixDemo(AppendixArgs),
    /// Sample autocorrelation of the response or of model residuals.
    #[command(args_override_self = true)]
    Acf(AcfArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// File of `key = value` lines using the long flag names; flags given on
    /// the command line take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for replicated work.
    #[arg(long)]
    threads: Option<usize>,
    /// Output path; standard output when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DesignArg {
    Blocked,
    Randomized,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// amp, amp_abs, phase or wiggly.
    #[arg(long, value_parser = parse_generator)]
    generator: Option<GeneratorKind>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    beta_w: Option<f64>,
    #[arg(long)]
    beta_b: Option<f64>,
    #[arg(long)]
    beta_bw: Option<f64>,
    /// Residual standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Random intercept standard deviation.
    #[arg(long)]
    sigma_b: Option<f64>,
    /// Random within-treatment slope standard deviation.
    #[arg(long)]
    sigma_bw: Option<f64>,
    /// Amplitude standard deviation (amp generators).
    #[arg(long)]
    sigma_alpha: Option<f64>,
    /// Common amplitude (phase generator).
    #[arg(long)]
    alpha: Option<f64>,
    /// Phase standard deviation (phase generator).
    #[arg(long)]
    sigma_phi: Option<f64>,
    /// Basis weight standard deviation (wiggly generator).
    #[arg(long)]
    sigma_tprs: Option<f64>,
    /// Number of basis functions (wiggly generator).
    #[arg(long)]
    k_gen: Option<usize>,
    #[arg(long, value_enum)]
    design: Option<DesignArg>,
    /// Do not reverse block order for half of the subjects.
    #[arg(long)]
    no_counterbalance: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Include the latent-truth columns.
    #[arg(long)]
    latent: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// LMMsine, GAMMfs, GAMMby, LMMmin or LMMmax.
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelVariant>,
    /// Include the treatment interaction.
    #[arg(long)]
    interaction: bool,
    /// Add a by-subject within-treatment slope to the smooth models.
    #[arg(long)]
    within_slope: bool,
    /// Basis dimension of the by-subject smooths.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Difference order (1 or 2) of the smooths' wiggliness penalty.
    #[arg(long, default_value_t = 1, value_parser = parse_difference)]
    difference: u8,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Approximate confidence intervals for the standard deviations.
    #[arg(long)]
    intervals: bool,
    /// Skip the intercept orthogonalization of the factor smooth (GAMMfs only).
    #[arg(long)]
    uncentered: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    gen: GenArgs,
    /// Comma-separated model variants; all five when absent.
    #[arg(long, value_delimiter = ',', value_parser = parse_model)]
    models: Vec<ModelVariant>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Use 1000 replicates.
    #[arg(long)]
    full_scale: bool,
    /// Comma-separated significance levels.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.01])]
    alphas: Vec<f64>,
    /// Base seed; replicate seeds are derived from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args, Debug)]
struct AppendixArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 2_000)]
    groups: usize,
    #[arg(long, default_value_t = 4.0)]
    shift: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_a: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_b_slope: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_eps: f64,
    /// Sets of group effects pooled in the Monte-Carlo covariance check.
    #[arg(long, default_value_t = 50)]
    mc_draws: usize,
    #[arg(long, default_value_t = 98)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AcfArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    max_lag: usize,
    /// Restrict to one subject's rows.
    #[arg(long)]
    subject: Option<u32>,
}

fn parse_generator(s: &str) -> Result<GeneratorKind, String> {
    s.parse().map_err(|e: chronofit::Error| e.to_string())
}

fn parse_difference(s: &str) -> Result<u8, String> {
    let order: u8 = s.parse().map_err(|e| format!("{e}"))?;
    Difference::from_order(order).map_err(|e| e.to_string())?;
    Ok(order)
}

fn parse_model(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: chronofit::Error| e.to_string())
}

const SUBCOMMANDS: [&str; 6] = ["simulate", "fit", "power", "type1", "appendix-demo", "acf"];

/// Splice the contents of a `--config` file into the argument list, right
/// after the subcommand, so that later command-line flags override it.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = args
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args
            .get(pos + 1)
            .cloned()
            .ok_or("--config requires a file path")?,
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config file {path}: {e}"))?;
    let mut injected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (key, value) = t
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key = value", i + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(format!(
                "{path}:{}: nested config files are not supported",
                i + 1
            ));
        }
        match value {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            v => {
                injected.push(format!("--{key}"));
                injected.push(v.to_string());
            }
        }
    }
    let at = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map_or(1, |p| p + 1);
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(ErrorKind::ArgumentConflict, msg)
        .exit()
}

fn missing(flag: &str) -> ! {
    Cli::command()
        .error(
            ErrorKind::MissingRequiredArgument,
            format!("the argument --{flag} is required"),
        )
        .exit()
}

/// Generator parameters: the preset for the generator with flag overrides.
fn sim_params(gen: &GenArgs, kind: GeneratorKind, preset: SimParams) -> SimParams {
    let mut p = preset;
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = gen.$flag { p.$field = v; })*
        };
    }
    set!(n_subjects <- subjects, n_trials <- trials, beta <- beta, beta_w <- beta_w,
         beta_b <- beta_b, beta_bw <- beta_bw, sigma <- sigma, sigma_b <- sigma_b,
         sigma_bw <- sigma_bw);
    if let Some(d) = gen.design {
        p.design = match d {
            DesignArg::Blocked => Design::Blocked,
            DesignArg::Randomized => Design::Randomized,
        };
    }
    if gen.no_counterbalance {
        p.counterbalanced = false;
    }
    let wrong =
        |flag: &str| -> ! { usage_error(format!("--{flag} does not apply to generator {kind}")) };
    match &mut p.effect {
        TimeEffect::Amplitude { sigma_alpha, .. } => {
            if let Some(v) = gen.sigma_alpha {
                *sigma_alpha = v;
            }
        }
        TimeEffect::Phase { alpha, sigma_phi } => {
            if let Some(v) = gen.alpha {
                *alpha = v;
            }
            if let Some(v) = gen.sigma_phi {
                *sigma_phi = v;
            }
        }
        TimeEffect::Wiggly { sigma_tprs, k_gen } => {
            if let Some(v) = gen.sigma_tprs {
                *sigma_tprs = v;
            }
            if let Some(v) = gen.k_gen {
                *k_gen = v;
            }
        }
        TimeEffect::None => {}
    }
    let amp = matches!(kind, GeneratorKind::Amp | GeneratorKind::AmpAbs);
    if !amp && gen.sigma_alpha.is_some() {
        wrong("sigma-alpha");
    }
    if kind != GeneratorKind::Phase && (gen.alpha.is_some() || gen.sigma_phi.is_some()) {
        wrong(if gen.alpha.is_some() {
            "alpha"
        } else {
            "sigma-phi"
        });
    }
    if kind != GeneratorKind::Wiggly && (gen.sigma_tprs.is_some() || gen.k_gen.is_some()) {
        wrong(if gen.sigma_tprs.is_some() {
            "sigma-tprs"
        } else {
            "k-gen"
        });
    }
    p
}

fn simulate_preset(kind: GeneratorKind) -> SimParams {
    match kind {
        GeneratorKind::Amp => SimParams::amp(),
        GeneratorKind::AmpAbs => SimParams::ampabs(),
        GeneratorKind::Phase => SimParams::phase_power(),
        GeneratorKind::Wiggly => SimParams::wiggly_power(),
    }
}

fn open_output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_data(path: &Path) -> chronofit::Result<LongDataset> {
    let file = File::open(path).map_err(|e| {
        chronofit::Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    LongDataset::read_csv(BufReader::new(file))
}

fn variant_options(m: &ModelArgs) -> VariantOptions {
    VariantOptions {
        interaction: m.interaction,
        within_slope: m.within_slope,
        k: m.k,
        difference: Difference::from_order(m.difference).expect("validated by the parser"),
    }
}

fn configure_threads(common: &Common) -> Result<(), String> {
    if let Some(n) = common.threads {
        if n == 0 {
            usage_error("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Simulate(a) => {
            let kind = a.gen.generator.unwrap_or_else(|| missing("generator"));
            let params = sim_params(&a.gen, kind, simulate_preset(kind)).with_seed(a.seed);
            let data = simulate(&params)?.data;
            let mut out = open_output(&a.common.out)?;
            writeln!(out, "# seed={} generator={kind}", a.seed)?;
            data.write_csv(&mut out, a.latent)?;
            out.flush()?;
        }
        Command::Fit(a) => {
            let variant = a.model.model.unwrap_or_else(|| missing("model"));
            let path = a.data.clone().unwrap_or_else(|| missing("data"));
            if a.uncentered && variant != ModelVariant::GammFs {
                usage_error("--uncentered applies only to --model GAMMfs");
            }
            let data = read_data(&path)?;
            let vopts = variant_options(&a.model);
            let fopts = FitOptions {
                intervals: a.intervals,
                ..Default::default()
            };
            let fit = if a.uncentered {
                fit_with_bug(variant, &data, &vopts, &fopts)?
            } else {
                fit_variant(variant, &data, &vopts, &fopts)?
            };
            let mut out = open_output(&a.common.out)?;
            writeln!(out, "# data={} model={variant}", path.display())?;
            match a.format {
                Format::Table => {
                    let title = if a.uncentered {
                        format!("{variant} (uncentered factor smooth)")
                    } else {
                        variant.to_string()
                    };
                    write!(out, "{}", fit_report(&fit, &title))?;
                }
                Format::Csv => {
                    writeln!(out, "name,estimate,se,t,p")?;
                    for c in &fit.coefficients {
                        writeln!(
                            out,
                            "{},{},{},{},{}",
                            c.name, c.estimate, c.se, c.statistic, c.p
                        )?;
                    }
                }
            }
            out.flush()?;
        }
        Command::Power(a) => run_study_cmd(a, false)?,
        Command::Type1(a) => run_study_cmd(a, true)?,
        Command::AppendixDemo(a) => {
            let cfg = AppendixConfig {
                n: a.n,
                groups: a.groups,
                sigma_a: a.sigma_a,
                sigma_b: a.sigma_b_slope,
                sigma_eps: a.sigma_eps,
                shift: a.shift,
                mc_draws: a.mc_draws,
                seed: a.seed,
            };
            let report = appendix_demo(&cfg)?;
            let mut out = open_output(&a.common.out)?;
            writeln!(out, "# seed={}", a.seed)?;
            write!(out, "{report}")?;
            out.flush()?;
        }
        Command::Acf(a) => {
            let path = a.data.clone().unwrap_or_else(|| missing("data"));
            let mut data = read_data(&path)?;
            if let Some(s) = a.subject {
                data = LongDataset::new(data.subject_rows(s).cloned().collect());
            }
            let series = match a.model.model {
                Some(m) => {
                    fit_variant(m, &data, &variant_options(&a.model), &FitOptions::default())?
                        .residuals
                }
                None => data.responses(),
            };
            let values = acf(&series, a.max_lag)?;
            let mut out = open_output(&a.common.out)?;
            write_acf_csv(&values, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn run_study_cmd(a: StudyArgs, null_mode: bool) -> Result<(), Box<dyn std::error::Error>> {
    let kind = a.gen.generator.unwrap_or(GeneratorKind::AmpAbs);
    if a.reps == 0 {
        usage_error("--reps must be at least 1");
    }
    configure_threads(&a.common)?;
    let models = if a.models.is_empty() {
        ModelVariant::ALL.to_vec()
    } else {
        a.models.clone()
    };
    let mut cfg = StudyConfig::new(kind, models, if a.full_scale { 1000 } else { a.reps });
    cfg.params = sim_params(&a.gen, kind, kind.default_params());
    cfg.alphas = a.alphas.clone();
    cfg.null_mode = null_mode;
    cfg.base_seed = a.seed;
    let summary = run_study(&cfg)?;
    let mut out = open_output(&a.common.out)?;
    writeln!(
        out,
        "# seed={} generator={kind} reps={}",
        a.seed, cfg.n_reps
    )?;
    match a.format {
        Format::Table => write!(out, "{}", study_table(&summary))?,
        Format::Csv => write_study_csv(&summary, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => usage_error(msg),
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
