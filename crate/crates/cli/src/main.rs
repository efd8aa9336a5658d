//! `gamma-sae`: fit, predict, MSE, diagnostics and simulation studies from
//! the command line. Every command writes CSV outputs plus `manifest.json`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gamma_sae::data::{self, DataConfig, SurveyData};
use gamma_sae::diagnostics::{self, CiRow, UhatRule};
use gamma_sae::gamma_gamma::{self, FitResult};
use gamma_sae::glmm::{self, GlmmFit};
use gamma_sae::informative::{eb_info_table, fit_informative, InfoOptions};
use gamma_sae::mse::{mse_table, write_mse_csv, MseConfig, MseVariant};
use gamma_sae::numerics::{write_param_csv, OptimizerConfig};
use gamma_sae::sim::{demo_dataset, run_study, DemoOptions, SimDesign, StudyConfig};
use gamma_sae::table::{Method, PredictionTable};
use gamma_sae::targets::{direct_table, TargetParameter};
use gamma_sae::Error;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "gamma-sae", version, about = "Small-area prediction under gamma models")]
struct Cli {
    /// Seed for every random stream (default 1; the demo command has its own default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with optional [data], [optimizer] and [study] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write parameter estimates with Wald intervals.
    Fit(FitArgs),
    /// Predict area parameters.
    Predict(PredictArgs),
    /// MSE estimates and normal-theory intervals for the EB predictor.
    Mse(MseArgs),
    /// Generalized (PIT) residuals.
    Diagnose(DiagnoseArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
    /// Write the synthetic demo data set.
    Demo(DemoArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Model {
    Gg,
    Glmm,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Survey CSV (columns area,y,x1..xp[,weight][,sampled]).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long, value_enum, default_value = "gg")]
    model: Model,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Quadrature nodes for the GLMM likelihood.
    #[arg(long, default_value_t = glmm::DEFAULT_NODES)]
    nodes: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    io: DataArgs,
    /// eb, eb-clsd, eb-hz, pi, m, dir or eb-info.
    #[arg(long, default_value = "eb")]
    method: Method,
    /// Comma-separated targets: mean, q:<p>, gini, exceed:<t>.
    #[arg(long, default_value = "mean", value_delimiter = ',')]
    targets: Vec<TargetParameter>,
    /// Monte Carlo size (EB_HZ: area-effect draws).
    #[arg(long, default_value_t = 100)]
    l: usize,
    /// EB_HZ completions per area-effect draw.
    #[arg(long, default_value_t = 10)]
    l_inner: usize,
    /// Fit artifact from `fit`; refitted from the data when absent.
    #[arg(long)]
    fit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MseArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long, default_value = "mean", value_delimiter = ',')]
    targets: Vec<TargetParameter>,
    /// Comma-separated: nobc, add, mult, hm, comp, s, d.
    #[arg(long, default_value = "nobc", value_delimiter = ',')]
    variants: Vec<MseVariant>,
    #[arg(long, default_value_t = 100)]
    b: usize,
    #[arg(long, default_value_t = 100)]
    b1: usize,
    #[arg(long, default_value_t = 1)]
    b2: usize,
    #[arg(long, default_value_t = 100)]
    l: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    fit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long, value_enum, default_value = "gg")]
    model: Model,
    /// Area effect plugged into gamma-gamma residuals: literal or posterior-mean.
    #[arg(long, default_value = "literal")]
    uhat: UhatRule,
    #[arg(long)]
    fit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// sim1-gg, sim1-glmm, sim2-mse or sim3-informative.
    #[arg(long)]
    preset: Option<String>,
    /// List the presets and exit.
    #[arg(long)]
    list: bool,
    /// Override the number of replicates.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Output CSV path.
    #[arg(long, default_value = "demo_erosion.csv")]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    optimizer: OptimizerConfig,
    study: Option<StudyConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
enum FitArtifact {
    GammaGamma { fit: FitResult },
    Glmm { fit: GlmmFit },
}

#[derive(Debug, Serialize)]
struct Versions {
    gamma_sae: &'static str,
    gamma_sae_cli: &'static str,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    args: Vec<String>,
    config: Option<PathBuf>,
    seed: u64,
    threads: usize,
    versions: Versions,
    seconds: f64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    exit_code: u8,
}

/// A failed command: message plus exit code (1 usage/data, 2 numerical).
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Convergence { .. } | Error::Estimator(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        usage(e.to_string())
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult<T> = Result<T, Failure>;

struct Ctx {
    seed: Option<u64>,
    config: CliConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    /// Exit code for a run that produced output but did not converge.
    soft_code: u8,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    fn opt(&self) -> &OptimizerConfig {
        &self.config.optimizer
    }

    fn load(&mut self, path: &Path) -> CmdResult<SurveyData> {
        let data = data::load_csv_with(path, &self.config.data).map_err(|e| match e {
            Error::Io(io) => usage(format!("{}: {io}", path.display())),
            other => Failure::from(other),
        })?;
        self.inputs.push(path.to_path_buf());
        let report = data::validate(&data);
        self.warnings.extend(report.issues.iter().map(|i| i.to_string()));
        Ok(data)
    }

    fn create(&mut self, path: PathBuf) -> CmdResult<BufWriter<File>> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let f = File::create(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    fn read_fit(&mut self, path: &Path) -> CmdResult<FitArtifact> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        self.inputs.push(path.to_path_buf());
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: not a fit artifact: {e}", path.display())))
    }

    fn gg_fit(&mut self, data: &SurveyData, artifact: Option<&Path>) -> CmdResult<FitResult> {
        let fit = match artifact {
            Some(p) => match self.read_fit(p)? {
                FitArtifact::GammaGamma { fit } => fit,
                FitArtifact::Glmm { .. } => return Err(usage("the fit artifact holds a GLMM; this needs gamma-gamma")),
            },
            None => gamma_gamma::fit(data, self.opt())?,
        };
        if !fit.converged {
            return Err(Failure {
                code: 2,
                message: format!("gamma-gamma fit did not converge after {} iterations", fit.iterations),
            });
        }
        Ok(fit)
    }

    fn glmm_fit(&mut self, data: &SurveyData, artifact: Option<&Path>) -> CmdResult<GlmmFit> {
        let fit = match artifact {
            Some(p) => match self.read_fit(p)? {
                FitArtifact::Glmm { fit } => fit,
                FitArtifact::GammaGamma { .. } => return Err(usage("the fit artifact holds a gamma-gamma fit; this needs the GLMM")),
            },
            None => glmm::glmm_fit(data, self.opt())?,
        };
        if !fit.converged {
            return Err(Failure {
                code: 2,
                message: format!("GLMM fit did not converge after {} iterations", fit.iterations),
            });
        }
        Ok(fit)
    }
}

fn cmd_fit(ctx: &mut Ctx, a: &FitArgs) -> CmdResult<()> {
    let data = ctx.load(&a.io.data)?;
    let (artifact, params, converged) = match a.model {
        Model::Gg => {
            let fit = gamma_gamma::fit(&data, ctx.opt())?;
            let table = gamma_gamma::parameter_table(&fit, &data, a.level)?;
            let ok = fit.converged;
            (FitArtifact::GammaGamma { fit }, table, ok)
        }
        Model::Glmm => {
            let fit = glmm::glmm_fit_with(&data, ctx.opt(), a.nodes)?;
            let table = glmm::parameter_table(&fit, &data, a.level)?;
            let ok = fit.converged;
            (FitArtifact::Glmm { fit }, table, ok)
        }
    };
    write_param_csv(&params, ctx.create(a.io.out.join("params.csv"))?)?;
    let json = serde_json::to_string_pretty(&artifact).map_err(|e| usage(e.to_string()))?;
    let mut w = ctx.create(a.io.out.join("fit.json"))?;
    std::io::Write::write_all(&mut w, json.as_bytes())?;
    if !converged {
        ctx.warnings.push("optimizer did not converge".into());
        ctx.soft_code = 2;
    }
    Ok(())
}

fn cmd_predict(ctx: &mut Ctx, a: &PredictArgs) -> CmdResult<()> {
    if a.method == Method::EbClsd && a.targets.iter().any(|t| !t.is_mean()) {
        return Err(usage("eb-clsd predicts the mean only"));
    }
    let data = ctx.load(&a.io.data)?;
    let seed = ctx.seed();
    let fit_path = a.fit.as_deref();
    let table: PredictionTable = match a.method {
        Method::Dir => direct_table(&data, &a.targets)?,
        Method::Eb => {
            let fit = ctx.gg_fit(&data, fit_path)?;
            gamma_gamma::eb_table(&fit.params, &data, &a.targets, a.l, seed)?
        }
        Method::EbClsd => {
            let fit = ctx.gg_fit(&data, fit_path)?;
            gamma_gamma::closed_table(&fit.params, &data, seed)?
        }
        Method::EbHz | Method::Pi | Method::M => {
            let fit = ctx.glmm_fit(&data, fit_path)?;
            glmm::glmm_table(&fit, &data, &a.targets, a.method, a.l, a.l_inner, seed)?
        }
        Method::EbInfo => {
            if !data.all_weighted() {
                return Err(usage("eb-info needs a design weight on every sampled unit"));
            }
            if fit_path.is_some() {
                ctx.warnings.push("eb-info refits the sample and weight models; --fit ignored".into());
            }
            let (model, wfit) = fit_informative(&data, ctx.opt())?;
            if wfit.degenerate {
                ctx.warnings.push("weights carry no response information; b set to 0".into());
            }
            let t = eb_info_table(&model, &data, &a.targets, a.l, seed, InfoOptions::default())?;
            let fallbacks: usize = t.rows.iter().map(|r| r.fallback_count).sum();
            if fallbacks > 0 {
                ctx.warnings.push(format!("{fallbacks} unit draws used the population-law fallback"));
            }
            t
        }
    };
    table.write_csv(ctx.create(a.io.out.join("predictions.csv"))?)?;
    Ok(())
}

fn cmd_mse(ctx: &mut Ctx, a: &MseArgs) -> CmdResult<()> {
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(usage(format!("confidence level {} must lie in (0, 1)", a.level)));
    }
    let data = ctx.load(&a.io.data)?;
    let fit = ctx.gg_fit(&data, a.fit.as_deref())?;
    let cfg = MseConfig {
        b: a.b,
        b1: a.b1,
        b2: a.b2,
        l: a.l,
        seed: ctx.seed(),
        direct: a.variants.iter().any(|v| v.needs_direct()),
    };
    let est = mse_table(&data, &fit, &a.targets, &cfg, ctx.opt())?;
    write_mse_csv(&est, &a.variants, ctx.create(a.io.out.join("mse.csv"))?)?;
    let mut rows = Vec::new();
    for e in &est {
        for v in &a.variants {
            if let Some(m) = e.get(*v) {
                rows.push(CiRow::new(&e.area, &e.target, v.label(), e.point, m, a.level));
            }
        }
    }
    let negative = rows.iter().filter(|r| !r.flag.is_empty()).count();
    if negative > 0 {
        ctx.warnings.push(format!("{negative} MSE estimates are negative; their intervals are suppressed"));
    }
    diagnostics::write_ci_csv(&rows, ctx.create(a.io.out.join("ci.csv"))?)?;
    Ok(())
}

fn cmd_diagnose(ctx: &mut Ctx, a: &DiagnoseArgs) -> CmdResult<()> {
    let data = ctx.load(&a.io.data)?;
    let set = match a.model {
        Model::Gg => {
            let fit = ctx.gg_fit(&data, a.fit.as_deref())?;
            diagnostics::residuals_gamma_gamma(&fit, &data, a.uhat)?
        }
        Model::Glmm => {
            let fit = ctx.glmm_fit(&data, a.fit.as_deref())?;
            diagnostics::residuals_glmm(&fit, &data)?
        }
    };
    if set.clamped > 0 {
        ctx.warnings.push(format!("{} residuals clamped away from 0 or 1", set.clamped));
    }
    set.write_csv(ctx.create(a.io.out.join("residuals.csv"))?)?;
    Ok(())
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> CmdResult<bool> {
    if a.list {
        for p in SimDesign::PRESETS {
            println!("{p}");
        }
        return Ok(false);
    }
    let mut study = ctx.config.study.clone().unwrap_or_default();
    if let Some(p) = &a.preset {
        study.preset = Some(p.clone());
    }
    if let Some(m) = a.m {
        study.m = Some(m);
    }
    if let Some(s) = ctx.seed {
        study.seed = Some(s);
    }
    let design = study.resolve()?;
    let table = run_study(&design, ctx.opt())?;
    table.write_metrics_csv(ctx.create(a.out.join("metrics.csv"))?)?;
    if !table.mse_rows.is_empty() {
        table.write_mse_csv(ctx.create(a.out.join("mse_metrics.csv"))?)?;
        table.write_t_bias_csv(ctx.create(a.out.join("t_bias.csv"))?)?;
    }
    let design_json = serde_json::to_string_pretty(&design).map_err(|e| usage(e.to_string()))?;
    let mut w = ctx.create(a.out.join("design.json"))?;
    std::io::Write::write_all(&mut w, design_json.as_bytes())?;
    ctx.warnings.extend(table.failures.iter().cloned());
    if table.capped > 0 {
        ctx.warnings.push(format!("{} inclusion probabilities capped at 1", table.capped));
    }
    ctx.seed = Some(design.seed);
    Ok(true)
}

fn cmd_demo(ctx: &mut Ctx, a: &DemoArgs) -> CmdResult<()> {
    let mut opts = DemoOptions::default();
    if let Some(s) = ctx.seed {
        opts.seed = s;
    }
    ctx.seed = Some(opts.seed);
    let data = demo_dataset(&opts)?;
    data::write_csv(&data, ctx.create(a.out.clone())?)?;
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Fit(_) => "fit",
        Command::Predict(_) => "predict",
        Command::Mse(_) => "mse",
        Command::Diagnose(_) => "diagnose",
        Command::Simulate(_) => "simulate",
        Command::Demo(_) => "demo",
    }
}

fn manifest_dir(c: &Command) -> PathBuf {
    match c {
        Command::Fit(a) => a.io.out.clone(),
        Command::Predict(a) => a.io.out.clone(),
        Command::Mse(a) => a.io.out.clone(),
        Command::Diagnose(a) => a.io.out.clone(),
        Command::Simulate(a) => a.out.clone(),
        Command::Demo(a) => a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

fn load_config(path: Option<&Path>) -> CmdResult<CliConfig> {
    let Some(p) = path else {
        return Ok(CliConfig::default());
    };
    let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    let cfg: CliConfig = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    cfg.optimizer.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CmdResult<u8> {
    let t0 = Instant::now();
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let mut ctx = Ctx {
        seed: cli.seed,
        config: load_config(cli.config.as_deref())?,
        inputs: Vec::new(),
        outputs: Vec::new(),
        warnings: Vec::new(),
        soft_code: 0,
    };
    if let Some(c) = &cli.config {
        ctx.inputs.push(c.clone());
    }
    let write_manifest = match &cli.command {
        Command::Fit(a) => cmd_fit(&mut ctx, a).map(|_| true),
        Command::Predict(a) => cmd_predict(&mut ctx, a).map(|_| true),
        Command::Mse(a) => cmd_mse(&mut ctx, a).map(|_| true),
        Command::Diagnose(a) => cmd_diagnose(&mut ctx, a).map(|_| true),
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
        Command::Demo(a) => cmd_demo(&mut ctx, a).map(|_| true),
    }?;
    for w in &ctx.warnings {
        eprintln!("warning: {w}");
    }
    if write_manifest {
        let manifest = Manifest {
            command: command_name(&cli.command).to_string(),
            args: std::env::args().skip(1).collect(),
            config: cli.config.clone(),
            seed: ctx.seed(),
            threads: rayon::current_num_threads(),
            versions: Versions {
                gamma_sae: gamma_sae::VERSION,
                gamma_sae_cli: env!("CARGO_PKG_VERSION"),
            },
            seconds: t0.elapsed().as_secs_f64(),
            inputs: ctx.inputs.clone(),
            outputs: ctx.outputs.clone(),
            warnings: ctx.warnings.clone(),
            exit_code: ctx.soft_code,
        };
        let dir = manifest_dir(&cli.command);
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(&dir)?;
        }
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| usage(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
    }
    Ok(ctx.soft_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => {
            if code != 0 {
                eprintln!("error: the fit did not converge (outputs written)");
            }
            ExitCode::from(code)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
