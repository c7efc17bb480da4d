use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use forge_core::baselines::{parse_methods, InContextPredictor, Method};
use forge_core::case_studies::{generate_suite_with, CaseBundle, CaseGroup, QuintileKey, SuiteConfig};
use forge_core::harness::{
    evaluate_suite, run_ablation, run_complexity, run_realworld, run_stress, run_tradeoff, split_bundle,
    BundleEvaluation, StressRow, TradeoffTable,
};
use forge_core::io::{emit_report, load_manifest, read_csv_rows, write_csv_rows, write_json};
use forge_core::metrics::{MetricsReport, PredictionSet};
use forge_core::model::{pretrain, resume, FairPfn, ModelCheckpoint, ModelConfig, TrainOptions};
use forge_core::scm_prior::{sample_prior_batch, PriorConfig};
use forge_core::ForgeError;

#[derive(Parser)]
#[command(name = "forge", version, about = "Counterfactually fair in-context classification toolkit")]
struct Cli {
    /// Master seed; every sub-seed is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw datasets from the causal prior.
    Prior {
        #[command(subcommand)]
        action: PriorAction,
    },
    /// Generate case-study bundles.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Pre-train the transformer on prior draws.
    Train(TrainArgs),
    /// Score methods on generated bundles.
    Evaluate(EvaluateArgs),
    /// Quintile ablations and the graph-complexity sweep.
    Sweep(SweepArgs),
    /// Bundles that violate the prior's assumptions.
    Stress(StressArgs),
    /// K-fold evaluation on a real dataset manifest.
    Real(RealArgs),
}

#[derive(Subcommand)]
enum PriorAction {
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Also store the exogenous and noise draws.
        #[arg(long)]
        keep_noise: bool,
    },
}

#[derive(Subcommand)]
enum BenchAction {
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct GenerateArgs {
    /// `all`, `benchmark`, `stress` or a comma list of group names.
    #[arg(long, default_value = "benchmark")]
    groups: String,
    #[arg(long, default_value_t = 10)]
    per_group: usize,
    #[arg(long, default_value_t = 100)]
    n_min: usize,
    #[arg(long, default_value_t = 10_000)]
    n_max: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    prior_config: Option<PathBuf>,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A bundle directory or a directory of bundle directories.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "fairpfn,unfair,unaware,avgcntf,constant,random,cfp")]
    methods: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// External predictions, `name=path.csv` with columns dataset,row,prob[,prob_cf].
    #[arg(long = "import-preds")]
    import_preds: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "base_ate")]
    BaseAte,
    Sigma,
    N,
    Complexity,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long)]
    ckpt: PathBuf,
    /// Reuse generated bundles instead of generating a fresh suite.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[command(flatten)]
    suite: GenerateArgs,
    /// Graph widths for the complexity axis.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,8")]
    widths: Vec<usize>,
}

#[derive(Args)]
struct StressArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    per_group: usize,
}

#[derive(Args)]
struct RealArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "fairpfn,unfair,unaware,avgcntf,constant,random,cfp")]
    methods: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: ErrorBody<'a>,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(f) = e.downcast_ref::<ForgeError>() {
        return f.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return "json";
    }
    "usage"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(error_kind(&e), format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: String) {
    let body = ErrorJson { error: ErrorBody { kind, message } };
    eprintln!("{}", serde_json::to_string(&body).expect("error serializes"));
}

fn out_dir(cli_out: &Option<PathBuf>, default: &str) -> anyhow::Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!(ForgeError::Json(e)).context(format!("parsing {}", path.display())))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Prior { action: PriorAction::Sample { config, count, keep_noise } } => {
            let mut cfg: PriorConfig = match config {
                Some(p) => read_json(&p)?,
                None => PriorConfig::default(),
            };
            cfg.seed = cli.seed;
            let dir = out_dir(&cli.out, "prior")?;
            let samples = sample_prior_batch(&cfg, count, cli.seed)?;
            for (i, s) in samples.iter().enumerate() {
                let d = dir.join(format!("sample_{i:04}"));
                fs::create_dir_all(&d)?;
                s.dataset.save_csv(&d.join("observational.csv"))?;
                s.counterfactual()?.save_csv(&d.join("counterfactual.csv"))?;
                let fair: Vec<FairRow> = s.y_fair.iter().enumerate().map(|(row, &y)| FairRow { row, y_fair: y }).collect();
                write_csv_rows(&fair, &d.join("y_fair.csv"))?;
                write_json(&s.scm, &d.join("scm.json"))?;
                if keep_noise {
                    write_json(&s.noise_draws, &d.join("noise.json"))?;
                }
            }
            println!("{}", serde_json::json!({ "samples": samples.len(), "out": dir }));
        }
        Command::Bench { action: BenchAction::Generate(args) } => {
            let dir = out_dir(&cli.out, "bench")?;
            let suite = generate_suite_with(&suite_config(&args, cli.seed)?)?;
            for b in &suite {
                let d = dir.join(&b.id);
                fs::create_dir_all(&d)?;
                write_json(b, &d.join("bundle.json"))?;
                b.observational.save_csv(&d.join("observational.csv"))?;
                b.counterfactual.save_csv(&d.join("counterfactual.csv"))?;
            }
            println!("{}", serde_json::json!({ "bundles": suite.len(), "out": dir }));
        }
        Command::Train(args) => {
            let dir = out_dir(&cli.out, "ckpt")?;
            let opts = TrainOptions {
                checkpoint_dir: Some(dir.clone()),
                checkpoint_every: args.checkpoint_every,
                log_every: args.log_every,
                max_steps_this_run: None,
            };
            let (ckpt, _) = if args.resume {
                resume(ModelCheckpoint::load(&dir.join("checkpoint.bin"))?, &opts)?
            } else {
                let mut model: ModelConfig = match &args.model_config {
                    Some(p) => read_json(p)?,
                    None => ModelConfig::default(),
                };
                model.seed = cli.seed;
                let prior: PriorConfig = match &args.prior_config {
                    Some(p) => read_json(p)?,
                    None => PriorConfig::training(),
                };
                pretrain(&model, &prior, &opts)?
            };
            println!("{}", serde_json::to_string(&ckpt.provenance)?);
        }
        Command::Evaluate(args) => evaluate(&cli.out, cli.seed, args)?,
        Command::Sweep(args) => sweep(&cli.out, cli.seed, args)?,
        Command::Stress(args) => {
            let dir = out_dir(&cli.out, "stress")?;
            let model = load_model(&args.ckpt)?;
            let mut cfg = SuiteConfig::new(args.per_group, cli.seed);
            cfg.groups = CaseGroup::STRESS.to_vec();
            let suite = generate_suite_with(&cfg)?;
            let methods = [Method::FairPfn, Method::Unfair];
            let evals = evaluate_suite(&suite, &methods, Some(&model), cli.seed)?;
            let rows = run_stress(&evals, &methods)?;
            write_json(&rows, &dir.join("stress.json"))?;
            write_csv_rows(&rows, &dir.join("stress.csv"))?;
            println!("{}", serde_json::json!({ "rows": rows.len(), "out": dir }));
        }
        Command::Real(args) => {
            let dir = out_dir(&cli.out, "real")?;
            let data = load_manifest(&args.manifest)?;
            let model = load_model(&args.ckpt)?;
            let report = run_realworld(&data, &parse_methods(&args.methods)?, Some(&model), cli.seed)?;
            write_json(&report, &dir.join("real.json"))?;
            emit_report(&report.folds, &dir.join("folds.json"))?;
            emit_report(&report.pooled, &dir.join("pooled.json"))?;
            write_csv_rows(&report.correlations, &dir.join("kendall.csv"))?;
            println!(
                "{}",
                serde_json::json!({ "folds": data.folds, "counterfactual": report.counterfactual_available, "out": dir })
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FairRow {
    row: usize,
    y_fair: u8,
}

fn parse_groups(spec: &str) -> anyhow::Result<Vec<CaseGroup>> {
    Ok(match spec {
        "all" => CaseGroup::BENCHMARK.iter().chain(&CaseGroup::STRESS).copied().collect(),
        "benchmark" => CaseGroup::BENCHMARK.to_vec(),
        "stress" => CaseGroup::STRESS.to_vec(),
        list => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
    })
}

fn suite_config(args: &GenerateArgs, seed: u64) -> anyhow::Result<SuiteConfig> {
    let mut cfg = SuiteConfig::new(args.per_group, seed);
    cfg.groups = parse_groups(&args.groups)?;
    if args.n_min > args.n_max {
        bail!(ForgeError::Config(format!("n_min {} above n_max {}", args.n_min, args.n_max)));
    }
    cfg.n_range = (args.n_min, args.n_max);
    Ok(cfg)
}

fn load_model(path: &Path) -> anyhow::Result<FairPfn> {
    let ck = ModelCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model())
}

fn load_bundles(path: &Path) -> anyhow::Result<Vec<CaseBundle>> {
    let single = path.join("bundle.json");
    if single.exists() {
        return Ok(vec![read_json(&single)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("bundle.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(ForgeError::Missing(format!("no bundle.json under {}", path.display())));
    }
    dirs.iter().map(|d| read_json(&d.join("bundle.json"))).collect()
}

#[derive(serde::Deserialize)]
struct ImportedRow {
    dataset: String,
    row: usize,
    prob: f64,
    prob_cf: Option<f64>,
}

#[derive(Serialize)]
struct QueryRow<'a> {
    dataset: &'a str,
    row: usize,
}

#[derive(Serialize)]
struct EvaluationReport {
    methods: Vec<String>,
    metrics: Vec<MetricsReport>,
    tradeoff: Option<TradeoffTable>,
    stress: Vec<StressRow>,
}

fn import_reports(spec: &str, suite: &[CaseBundle], seed: u64) -> anyhow::Result<Vec<MetricsReport>> {
    let (name, path) = spec.split_once('=').ok_or_else(|| ForgeError::Config(format!("expected name=path, got `{spec}`")))?;
    let rows: Vec<ImportedRow> = read_csv_rows(Path::new(path))?;
    let mut out = Vec::new();
    for b in suite {
        let task = split_bundle(b, forge_core::rng::derive_seed(seed, b.config.seed))?;
        let query_rows = query_rows(b, seed)?;
        let mut obs = vec![f64::NAN; query_rows.len()];
        let mut cf = vec![f64::NAN; query_rows.len()];
        for r in rows.iter().filter(|r| r.dataset == b.id) {
            if let Ok(k) = query_rows.binary_search(&r.row) {
                obs[k] = r.prob;
                cf[k] = r.prob_cf.unwrap_or(f64::NAN);
            }
        }
        if obs.iter().any(|v| v.is_nan()) {
            bail!(ForgeError::Missing(format!("{name}: predictions missing for query rows of {}", b.id)));
        }
        let obs_set = PredictionSet::new(obs, Some(task.auc_labels.clone()), task.query.a.clone())?;
        let cf_set = if cf.iter().all(|v| v.is_finite()) {
            Some(PredictionSet::new(cf, None, task.query_cf.as_ref().expect("bundles have twins").a.clone())?)
        } else {
            None
        };
        out.push(MetricsReport::compute(&b.id, name, &obs_set, cf_set.as_ref())?);
    }
    Ok(out)
}

/// Original row ids of a bundle's query rows, ascending.
fn query_rows(b: &CaseBundle, seed: u64) -> anyhow::Result<Vec<usize>> {
    let mut tagged = b.clone();
    let n = b.n_rows();
    tagged.observational.x = ndarray::Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
    tagged.observational.column_names = vec!["A".into(), "row".into()];
    tagged.observational.protected_index = 0;
    let task = split_bundle(&tagged, forge_core::rng::derive_seed(seed, b.config.seed))?;
    Ok(task.query.x.column(0).iter().map(|&v| v as usize).collect())
}

fn evaluate(cli_out: &Option<PathBuf>, seed: u64, args: EvaluateArgs) -> anyhow::Result<()> {
    let out = cli_out.clone().unwrap_or_else(|| PathBuf::from("report.json"));
    let report_path = if out.extension().is_some_and(|e| e == "json") { out } else { out.join("report.json") };
    let dir = report_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let suite = load_bundles(&args.bundle)?;
    let methods = parse_methods(&args.methods)?;
    let model = match &args.ckpt {
        Some(p) => Some(load_model(p)?),
        None if methods.iter().any(|m| m.needs_model()) => {
            bail!(ForgeError::Missing("--ckpt is required for model-based methods".into()))
        }
        None => None,
    };
    let base = model.as_ref().map(|m| m as &dyn InContextPredictor);
    let evals: Vec<BundleEvaluation> = evaluate_suite(&suite, &methods, base, seed)?;
    let mut metrics: Vec<MetricsReport> = evals.iter().flat_map(|e| e.reports.clone()).collect();
    for spec in &args.import_preds {
        metrics.extend(import_reports(spec, &suite, seed)?);
    }
    let benchmark: Vec<BundleEvaluation> = evals.iter().filter(|e| !e.group.is_some_and(CaseGroup::is_stress)).cloned().collect();
    let tradeoff = if benchmark.is_empty() { None } else { Some(run_tradeoff(&benchmark, &methods)?) };
    let stress = run_stress(&evals, &methods)?;
    let mut queries = Vec::new();
    for b in &suite {
        for row in query_rows(b, seed)? {
            queries.push((b.id.clone(), row));
        }
    }
    let query_table: Vec<QueryRow> = queries.iter().map(|(d, r)| QueryRow { dataset: d, row: *r }).collect();
    write_csv_rows(&query_table, &dir.join("query_rows.csv"))?;
    emit_report(&metrics, &dir.join("metrics.json"))?;
    if let Some(t) = &tradeoff {
        write_csv_rows(&t.rows, &dir.join("tradeoff.csv"))?;
        write_csv_rows(&t.summary, &dir.join("tradeoff_summary.csv"))?;
        write_csv_rows(&t.diff_to_avgcntf, &dir.join("diff_to_avgcntf.csv"))?;
    }
    if !stress.is_empty() {
        write_csv_rows(&stress, &dir.join("stress.csv"))?;
    }
    let report = EvaluationReport { methods: methods.iter().map(|m| m.name().to_string()).collect(), metrics, tradeoff, stress };
    write_json(&report, &report_path)?;
    println!("{}", serde_json::json!({ "bundles": suite.len(), "report": report_path }));
    Ok(())
}

fn sweep(cli_out: &Option<PathBuf>, seed: u64, args: SweepArgs) -> anyhow::Result<()> {
    let dir = out_dir(cli_out, "sweep")?;
    let model = load_model(&args.ckpt)?;
    let methods = [Method::FairPfn, Method::Unfair];
    let key = match args.axis {
        Axis::BaseAte => QuintileKey::BaseAte,
        Axis::Sigma => QuintileKey::Sigma,
        Axis::N => QuintileKey::N,
        Axis::Complexity => {
            let rows = run_complexity(&args.widths, args.suite.per_group, model.config.max_features, &methods, Some(&model), seed)?;
            write_csv_rows(&rows, &dir.join("complexity.csv"))?;
            write_json(&rows, &dir.join("complexity.json"))?;
            println!("{}", serde_json::json!({ "rows": rows.len(), "out": dir }));
            return Ok(());
        }
    };
    let suite = match &args.bundle {
        Some(p) => load_bundles(p)?,
        None => generate_suite_with(&suite_config(&args.suite, seed)?)?,
    };
    let evals = evaluate_suite(&suite, &methods, Some(&model), seed)?;
    let table = run_ablation(&suite, &evals, key, &methods)?;
    write_json(&table, &dir.join("ablation.json"))?;
    write_csv_rows(&table.rows, &dir.join("quintiles.csv"))?;
    write_csv_rows(&table.samples, &dir.join("ablation_samples.csv"))?;
    println!("{}", serde_json::json!({ "axis": table.axis, "bundles": suite.len(), "out": dir }));
    Ok(())
}
