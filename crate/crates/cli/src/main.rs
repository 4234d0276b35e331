//! `pascl` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or state error,
//! 4 numeric failure or divergence, 5 failed check, 6 refused overwrite or
//! I/O error, 7 failed grid cells.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use pascl::dualnet::{read_checkpoint, write_checkpoint, Branch};
use pascl::gradsuite::{gradient_suite, SUITE_SEEDS, SUITE_STEP, SUITE_TOLERANCE};
use pascl::metrics::format_percent_table;
use pascl::objectives::{ContrastVariant, ScoreFn};
use pascl::synth::{generate_synthetic, read_examples_csv, write_examples_csv, ClassProfile, DatasetSplit, LabeledExample, ProfileSummary};
use pascl::twostage::{
    ablation_grid, aggregate_summary_csv, evaluate, export_embeddings, format_summary_table, run_on_data,
    summary_groups_csv, Evaluation, ExperimentConfig, GridAxes, RunRecord,
};
use pascl::{Network64, PasclError};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_CHECK: u8 = 5;
const EXIT_IO: u8 = 6;
const EXIT_GRID: u8 = 7;

const SPLITS: [&str; 4] = ["train_in", "train_out", "test_in", "test_out"];

#[derive(Parser, Debug)]
#[command(name = "pascl", version, about = "Long-tailed OOD detection experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file; flags below override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, env = "PASCL_OUT", default_value = "pascl-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Fraction of classes treated as tail classes
    #[arg(long, global = true)]
    k: Option<f64>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// OOD score: msp or energy
    #[arg(long, global = true)]
    score: Option<String>,
    #[arg(long, global = true)]
    n1: Option<usize>,
    #[arg(long, global = true)]
    n2: Option<usize>,
    /// Overwrite existing artifacts
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic long-tailed benchmark
    GenData,
    /// Run both training stages on generated data
    Train {
        /// Directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Also dump penultimate features of the test sets
        #[arg(long)]
        embeddings: bool,
    },
    /// Evaluate a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an ablation grid
    Ablate {
        /// Number of seeds, starting at --seed (default 0)
        #[arg(long, default_value_t = 6)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated variants; all five by default
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Comma-separated tail fractions; the config's k by default
        #[arg(long, value_delimiter = ',')]
        ks: Vec<f64>,
        /// Comma-separated contrastive weights; the config's lambda2 by default
        #[arg(long, value_delimiter = ',')]
        lambda2s: Vec<f64>,
        /// Skip the lambda2 = 0 baseline cells
        #[arg(long)]
        no_oe: bool,
    },
    /// Finite-difference check of every loss
    Gradcheck {
        #[arg(long, default_value_t = SUITE_SEEDS)]
        seeds: u64,
    },
    /// Aggregate summary CSVs into mean ± std tables
    Report {
        /// Summary CSV files, or run directories containing one
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Error carrying its own exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn fail(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Failure { code, msg: msg.into() }.into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<PasclError>() {
            return match e {
                PasclError::Config(_) => EXIT_CONFIG,
                PasclError::InvalidInput(_) | PasclError::Data(_) | PasclError::State(_) => EXIT_DATA,
                PasclError::NumericOverflow(_) | PasclError::Divergence(_) => EXIT_NUMERIC,
                PasclError::Io(_) => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |key, v: Option<String>| {
            if let Some(v) = v {
                out.push((key, v));
            }
        };
        put("variant", self.variant.clone());
        put("k", self.k.map(|v| v.to_string()));
        put("lambda1", self.lambda1.map(|v| v.to_string()));
        put("lambda2", self.lambda2.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("score", self.score.clone());
        put("n1", self.n1.map(|v| v.to_string()));
        put("n2", self.n2.map(|v| v.to_string()));
        out
    }

    /// Config file (or `fallback`, or defaults) with flag overrides, validated.
    /// `--seed` sets both seeds unless `train_seed_only`.
    fn experiment(&self, fallback: Option<ExperimentConfig>, train_seed_only: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = read_text(path)?;
                let mut cfg = ExperimentConfig::default();
                cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
                cfg
            }
            None => fallback.unwrap_or_default(),
        };
        for (key, value) in self.overrides() {
            cfg.set(key, &value)?;
        }
        if let Some(seed) = self.seed {
            if train_seed_only {
                cfg.train.seed = seed;
            } else {
                cfg.set("seed", &seed.to_string())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| fail(EXIT_DATA, format!("cannot read {}: {e}", path.display())))
}

/// Creates `dir` and refuses to clobber any of `names` unless `force`.
fn prepare_out(dir: &Path, names: &[String], force: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    if !force {
        if let Some(existing) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
            return Err(fail(
                EXIT_IO,
                format!("{} already exists; pass --force to overwrite", existing.display()),
            ));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn load_data(dir: &Path, tail_fraction: f64) -> Result<(ExperimentConfig, ClassProfile, DatasetSplit)> {
    let data_cfg = ExperimentConfig::from_text(&read_text(&dir.join("config.txt"))?)
        .with_context(|| format!("in {}", dir.join("config.txt").display()))?;
    let summary: ProfileSummary = serde_json::from_str(&read_text(&dir.join("profile.json"))?)
        .map_err(|e| fail(EXIT_DATA, format!("profile.json: {e}")))?;
    summary.to_profile()?;
    let profile = ClassProfile::new(summary.counts, tail_fraction)?;
    let mut parts: Vec<Vec<LabeledExample>> = Vec::new();
    for name in SPLITS {
        let path = dir.join(format!("{name}.csv"));
        let file = fs::File::open(&path).map_err(|e| fail(EXIT_DATA, format!("cannot read {}: {e}", path.display())))?;
        let mut rows = read_examples_csv(BufReader::new(file)).with_context(|| path.display().to_string())?;
        for e in &mut rows {
            e.tail = e.label.class().is_some_and(|c| profile.is_tail(c));
        }
        parts.push(rows);
    }
    let mut it = parts.into_iter();
    let mut next = || it.next().unwrap_or_default();
    let split = DatasetSplit { train_in: next(), train_out: next(), test_in: next(), test_out: next() };
    Ok((data_cfg, profile, split))
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.experiment(None, false)?;
    let mut files: Vec<String> = SPLITS.iter().map(|s| format!("{s}.csv")).collect();
    files.extend(names(&["profile.json", "config.txt"]));
    prepare_out(&c.out, &files, c.force)?;
    let (profile, split) = generate_synthetic(&cfg.data)?;
    for (name, rows) in SPLITS.iter().zip([&split.train_in, &split.train_out, &split.test_in, &split.test_out]) {
        let file = fs::File::create(c.out.join(format!("{name}.csv")))?;
        write_examples_csv(BufWriter::new(file), rows, cfg.data.dim)?;
    }
    let summary = ProfileSummary::new(&profile, cfg.data.tail_fraction, cfg.data.rho);
    write_file(&c.out.join("profile.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_file(&c.out.join("config.txt"), &cfg.to_text())?;
    println!("counts      {:?}", profile.counts);
    println!("realized rho {} (requested {})", summary.realized_rho, cfg.data.rho);
    println!("tail classes {:?}", summary.tail_set);
    println!("wrote {}", c.out.display());
    Ok(())
}

fn print_trace(record: &RunRecord) {
    for e in record.stage1.epochs.iter().chain(&record.stage2.epochs) {
        eprintln!("stage {} epoch {:>3} loss {:.6} lr {:.3e}", e.stage, e.epoch, e.loss, e.lr);
    }
}

fn train(c: &Common, data: &Path, embeddings: bool) -> Result<()> {
    let data_cfg = ExperimentConfig::from_text(&read_text(&data.join("config.txt"))?)?;
    let mut cfg = c.experiment(Some(data_cfg.clone()), true)?;
    // the data section always describes the data on disk; only k may differ
    let k = cfg.data.tail_fraction;
    cfg.data = data_cfg.data;
    cfg.data.tail_fraction = k;
    let (_, profile, split) = load_data(data, k)?;

    let mut files = names(&["checkpoint.txt", "record.json", "summary.csv", "loss_trace.csv", "config.txt", "timing.txt"]);
    if embeddings {
        files.push("embeddings_main.csv".into());
    }
    prepare_out(&c.out, &files, c.force)?;
    write_file(&c.out.join("config.txt"), &cfg.to_text())?;
    let outcome = match run_on_data::<f64>(&cfg, &profile, &split) {
        Ok(o) => o,
        Err(e @ (PasclError::Divergence(_) | PasclError::NumericOverflow(_))) => {
            let path = c.out.join("failure.txt");
            write_file(&path, &format!("{e}\n\n{}", cfg.to_text()))?;
            return Err(fail(EXIT_NUMERIC, format!("{e} (details in {})", path.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let record = &outcome.record;
    if c.verbose {
        print_trace(record);
    }
    let mut ckpt = BufWriter::new(fs::File::create(c.out.join("checkpoint.txt"))?);
    write_checkpoint(&outcome.net, &mut ckpt)?;
    ckpt.flush()?;
    write_file(&c.out.join("record.json"), &record.to_json())?;
    let mut summary = RunRecord::summary_csv_header();
    summary.push('\n');
    for row in record.summary_csv_rows() {
        summary.push_str(&row);
        summary.push('\n');
    }
    write_file(&c.out.join("summary.csv"), &summary)?;
    write_file(&c.out.join("loss_trace.csv"), &record.loss_trace_csv())?;
    write_file(&c.out.join("timing.txt"), &format!("wall_clock_seconds {}\n", outcome.wall_clock.as_secs_f64()))?;
    if embeddings {
        let mut rows = split.test_in.clone();
        rows.extend(split.test_out.iter().cloned());
        let file = BufWriter::new(fs::File::create(c.out.join("embeddings_main.csv"))?);
        export_embeddings(&outcome.net, &rows, Branch::Main, file)?;
    }
    let rows: Vec<(String, &_)> = record
        .evaluations
        .iter()
        .map(|e| (format!("{}{}", e.score_fn.as_str(), if e.abf { " + ABF" } else { "" }), &e.report))
        .collect();
    println!("{}", format_percent_table(&rows));
    println!("config hash {}  wrote {}", record.config_hash, c.out.display());
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let run_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let fallback = match fs::read_to_string(run_dir.join("config.txt")) {
        Ok(text) => Some(ExperimentConfig::from_text(&text)?),
        Err(_) => None,
    };
    let cfg = c.experiment(fallback, true)?;
    let (_, profile, split) = load_data(data, cfg.data.tail_fraction)?;
    let file = fs::File::open(checkpoint)
        .map_err(|e| fail(EXIT_DATA, format!("cannot read {}: {e}", checkpoint.display())))?;
    let net: Network64 = read_checkpoint(BufReader::new(file))?;
    if net.config().input_dim != cfg.data.dim || net.config().classes != profile.classes() {
        return Err(fail(EXIT_DATA, "checkpoint does not match the data dimensions"));
    }
    let score = cfg.train.score_fn;
    let stem = format!("eval_{}", score.as_str());
    prepare_out(&c.out, &[format!("{stem}.csv"), format!("{stem}.json")], c.force)?;
    let hash = cfg.hash();
    let abf_states: &[bool] = if net.aux_initialized() { &[false, true] } else { &[false] };
    let mut evaluations = Vec::new();
    for &abf in abf_states {
        let report = evaluate(&net, &split, &profile, score, abf, cfg.train.seed, &hash)?;
        evaluations.push(Evaluation { score_fn: score, abf, report });
    }
    let mut csv = format!("score,abf,{}\n", pascl::metrics::MetricsReport::csv_header());
    for e in &evaluations {
        csv.push_str(&format!("{},{},{}\n", score.as_str(), u8::from(e.abf), e.report.to_csv_row()));
    }
    write_file(&c.out.join(format!("{stem}.csv")), &csv)?;
    write_file(&c.out.join(format!("{stem}.json")), &serde_json::to_string_pretty(&evaluations)?)?;
    let rows: Vec<(String, &_)> = evaluations
        .iter()
        .map(|e| (if e.abf { "main + ABF".to_string() } else { "main".to_string() }, &e.report))
        .collect();
    println!("{}", format_percent_table(&rows));
    Ok(())
}

fn ablate(
    c: &Common,
    seeds: u64,
    jobs: usize,
    variants: &[String],
    ks: &[f64],
    lambda2s: &[f64],
    no_oe: bool,
) -> Result<()> {
    let base = c.experiment(None, false)?;
    let first = c.seed.unwrap_or(0);
    let variants = if variants.is_empty() {
        ContrastVariant::ALL.to_vec()
    } else {
        variants.iter().map(|v| v.parse()).collect::<pascl::Result<Vec<ContrastVariant>>>()?
    };
    let mut axes = GridAxes::component_study(&base, (first..first + seeds).collect());
    axes.variants = variants;
    axes.include_oe = !no_oe;
    if !ks.is_empty() {
        axes.ks = ks.to_vec();
    }
    if !lambda2s.is_empty() {
        axes.lambda2s = lambda2s.to_vec();
    }
    for &k in &axes.ks {
        let mut probe = base.clone();
        probe.data.tail_fraction = k;
        probe.validate()?;
    }
    for &l in &axes.lambda2s {
        let mut probe = base.clone();
        probe.train.weights.lambda2 = l;
        probe.validate()?;
    }
    let files = names(&["grid_summary.csv", "grid_table.txt", "components.txt", "grid.json", "config.txt"]);
    prepare_out(&c.out, &files, c.force)?;
    if c.verbose {
        eprintln!("running {} cells on {jobs} thread(s)", axes.cells().len());
    }
    let grid = ablation_grid(&base, &axes, jobs)?;
    let score = base.train.score_fn;
    let table = grid.format_grid_table(score);
    let mut components = String::new();
    for &k in &axes.ks {
        for &l in &axes.lambda2s {
            components.push_str(&format!("k = {k}, lambda2 = {l}, score = {}\n", score.as_str()));
            components.push_str(&grid.format_component_table(score, k, l));
            components.push('\n');
        }
    }
    write_file(&c.out.join("grid_summary.csv"), &grid.summary_csv())?;
    write_file(&c.out.join("grid_table.txt"), &table)?;
    write_file(&c.out.join("components.txt"), &components)?;
    write_file(&c.out.join("grid.json"), &serde_json::to_string_pretty(&grid)?)?;
    write_file(&c.out.join("config.txt"), &base.to_text())?;
    println!("{components}");
    if c.verbose {
        println!("{table}");
    }
    let failed: Vec<String> = grid
        .cells
        .iter()
        .filter_map(|cell| cell.error.as_ref().map(|e| format!("{} k={} seed={}: {e}", cell.key.method(), cell.key.k, cell.key.seed)))
        .collect();
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("failed cell {f}");
        }
        return Err(fail(EXIT_GRID, format!("{} of {} cells failed", failed.len(), grid.cells.len())));
    }
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<()> {
    let report = gradient_suite(seeds, SUITE_STEP, SUITE_TOLERANCE)?;
    println!("{:<24} {:>6} {:>7} {:>12} {:>12}", "loss", "cases", "failed", "max abs", "max rel");
    for s in report.summaries() {
        println!(
            "{:<24} {:>6} {:>7} {:>12.3e} {:>12.3e}",
            s.loss.to_string(),
            s.cases,
            s.failed,
            s.max_abs_error,
            s.max_rel_error
        );
    }
    if report.pass() {
        println!("all gradients match (step {SUITE_STEP:e}, tolerance {SUITE_TOLERANCE:e})");
        Ok(())
    } else {
        Err(fail(EXIT_CHECK, "gradient check failed"))
    }
}

fn report(c: &Common, inputs: &[PathBuf]) -> Result<()> {
    let mut texts = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            ["summary.csv", "grid_summary.csv"]
                .iter()
                .map(|n| input.join(n))
                .find(|p| p.exists())
                .ok_or_else(|| fail(EXIT_DATA, format!("no summary CSV in {}", input.display())))?
        } else {
            input.clone()
        };
        texts.push(read_text(&path)?);
    }
    let groups = aggregate_summary_csv(&texts)?;
    prepare_out(&c.out, &names(&["report.csv", "report.txt"]), c.force)?;
    let table = format_summary_table(&groups);
    write_file(&c.out.join("report.csv"), &summary_groups_csv(&groups))?;
    write_file(&c.out.join("report.txt"), &table)?;
    println!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(score) = &c.score {
        score.parse::<ScoreFn>()?;
    }
    match &cli.command {
        Command::GenData => gen_data(c),
        Command::Train { data, embeddings } => train(c, data, *embeddings),
        Command::Eval { checkpoint, data } => eval(c, checkpoint, data),
        Command::Ablate { seeds, jobs, variants, ks, lambda2s, no_oe } => {
            ablate(c, *seeds, *jobs, variants, ks, lambda2s, *no_oe)
        }
        Command::Gradcheck { seeds } => gradcheck(*seeds),
        Command::Report { inputs } => report(c, inputs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
