//! Command-line front end. Experiments are described in JSON; scalar flags
//! override the config. Data goes to files, standard output gets one line.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{
    build_toolbox, long_rows, param_label, replicate, write_long_csv, write_metrics_csv, LongRow,
    MethodSpec, MetricsRow, RunSettings, Scenario, Sweep, ToolboxEntry, LONG_HEADER,
    METRICS_HEADER,
};
use crate::datamodel::{load_csv, ColumnSchema, InferenceData, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::modelselect::{ptams, ptams_plus, CoinStream, SelectionOptions, DEFAULT_LAMBDA_GRID};
use crate::pipeline::{
    check_level, run_scq, ScqOptions, ScqOutcome, StructureWeighting, WeightScheme,
};
use crate::scoring::{ClassifierSpec, Family, Method};
use crate::seeding::derive_seed;
use crate::weights::write_weights_csv;

#[derive(Debug, Parser)]
#[command(
    name = "scq",
    version,
    about = "Conformal outlier detection with structure-adaptive q-values"
)]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Target FDR level.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replications for `simulate`.
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run seeded synthetic replications and write metric tables.
    Simulate,
    /// Run SCQ with one classifier on a CSV dataset.
    Infer { data: PathBuf },
    /// Select a classifier from a toolbox, then run SCQ with it.
    Select {
        data: PathBuf,
        /// Also select the sparsity screening level.
        #[arg(long)]
        plus: bool,
    },
    /// Merge metric tables found under a directory and summarize them.
    Report { dir: PathBuf },
}

pub const DEFAULT_OUT: &str = "scq-out";

fn default_alpha() -> f64 {
    0.05
}

fn default_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

fn default_reps() -> usize {
    100
}

fn default_classifier() -> ClassifierSpec {
    ClassifierSpec::new(Family::Occ, Method::Kde)
}

fn default_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub scenario: Scenario,
    pub methods: Vec<MethodSpec>,
    #[serde(flatten)]
    pub settings: RunSettings,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    #[serde(default = "default_classifier")]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub weights: WeightScheme,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub jitter: bool,
    #[serde(default)]
    pub schema: ColumnSchema,
    #[serde(default)]
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub toolbox: Vec<ToolboxEntry>,
    #[serde(default)]
    pub weights: WeightScheme,
    /// Structure weighting used with `--plus`.
    #[serde(default)]
    pub structure: StructureWeighting,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub alpha0: Option<f64>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub jitter: bool,
    #[serde(default)]
    pub schema: ColumnSchema,
    #[serde(default)]
    pub seed: u64,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn out_dir(cli: &Cli, fallback: &Path) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| fallback.to_path_buf());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_data(
    path: &Path,
    schema: &ColumnSchema,
    train_fraction: f64,
    seed: u64,
) -> Result<InferenceData> {
    check_level("train_fraction", train_fraction)?;
    let (pool, test) = load_csv(path, schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    InferenceData::from_pool(&pool, test, train_fraction, &mut rng)
}

fn write_outcome(dir: &Path, data: &InferenceData, outcome: &ScqOutcome) -> Result<()> {
    write_json(&dir.join("report.json"), &outcome.report())?;
    let file = BufWriter::new(File::create(dir.join("weights.csv"))?);
    write_weights_csv(
        file,
        data.test.side_info(),
        outcome.sparsity.as_ref(),
        &outcome.weights,
    )
}

fn cmd_simulate(cli: &Cli) -> Result<String> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("simulate needs --config".into()))?;
    let mut cfg: SimulateConfig = read_config(path)?;
    if let Some(a) = cli.alpha {
        cfg.settings.alpha = a;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.reps {
        cfg.reps = r;
    }
    cfg.settings.validate()?;
    let dir = out_dir(cli, Path::new(DEFAULT_OUT))?;

    let points: Vec<(String, Scenario)> = match &cfg.sweep {
        None => vec![(String::new(), cfg.scenario.clone())],
        Some(sweep) => sweep
            .values
            .iter()
            .map(|v| Ok((param_label(v), sweep.apply(&cfg.scenario, v)?)))
            .collect::<Result<_>>()?,
    };

    #[derive(Serialize)]
    struct Block<'a> {
        #[serde(skip_serializing_if = "Option::is_none")]
        field: Option<&'a str>,
        param_value: &'a str,
        reps: usize,
        seed: u64,
        alpha: f64,
        rows: &'a [MetricsRow],
    }

    let mut wide = Vec::new();
    let mut long = Vec::new();
    let mut blocks = Vec::new();
    for (label, scenario) in &points {
        let rows = replicate(
            &cfg.methods,
            &scenario.config(),
            cfg.reps,
            cfg.seed,
            &cfg.settings,
        )?
        .metrics()?;
        long.extend(long_rows(&rows, label));
        wide.extend(rows.iter().cloned().map(|mut r| {
            if let Some(sweep) = &cfg.sweep {
                r.method = format!("{}[{}={}]", r.method, sweep.field, label);
            }
            r
        }));
        blocks.push((label.clone(), rows));
    }
    let json: Vec<Block> = blocks
        .iter()
        .map(|(label, rows)| Block {
            field: cfg.sweep.as_ref().map(|s| s.field.as_str()),
            param_value: label,
            reps: cfg.reps,
            seed: cfg.seed,
            alpha: cfg.settings.alpha,
            rows,
        })
        .collect();
    write_metrics_csv(
        BufWriter::new(File::create(dir.join("metrics.csv"))?),
        &wide,
    )?;
    write_long_csv(BufWriter::new(File::create(dir.join("long.csv"))?), &long)?;
    write_json(&dir.join("metrics.json"), &json)?;
    Ok(format!(
        "simulated {} methods x {} settings x {} reps -> {}",
        cfg.methods.len(),
        points.len(),
        cfg.reps,
        dir.display()
    ))
}

fn cmd_infer(cli: &Cli, data_path: &Path) -> Result<String> {
    let mut cfg: InferConfig = match &cli.config {
        Some(p) => read_config(p)?,
        None => InferConfig::default(),
    };
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    check_level("alpha", cfg.alpha)?;
    cfg.classifier.validate()?;
    let data = load_data(data_path, &cfg.schema, cfg.train_fraction, cfg.seed)?;
    let opts = ScqOptions {
        alpha: cfg.alpha,
        jitter_seed: cfg.jitter.then(|| derive_seed(cfg.seed, 2)),
    };
    let outcome = run_scq(&cfg.classifier, &data, &cfg.weights, &opts)?;
    let dir = out_dir(cli, Path::new(DEFAULT_OUT))?;
    write_outcome(&dir, &data, &outcome)?;
    Ok(format!(
        "rejected {} of {} at alpha {}",
        outcome.rejection.len(),
        data.m(),
        cfg.alpha
    ))
}

fn cmd_select(cli: &Cli, data_path: &Path, plus: bool) -> Result<String> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("select needs --config with a toolbox".into()))?;
    let mut cfg: SelectConfig = read_config(path)?;
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let toolbox = build_toolbox(&cfg.toolbox)?;
    let opts = SelectionOptions {
        alpha: cfg.alpha,
        alpha0: cfg.alpha0,
        coins: CoinStream::new(derive_seed(cfg.seed, 1)),
        jitter_seed: cfg.jitter.then(|| derive_seed(cfg.seed, 2)),
    };
    check_level("alpha", cfg.alpha)?;
    check_level("alpha0", opts.alpha0())?;
    let data = load_data(data_path, &cfg.schema, cfg.train_fraction, cfg.seed)?;
    let sel = if plus {
        ptams_plus(&toolbox, &data, &cfg.structure, &cfg.lambda_grid, &opts)?
    } else {
        ptams(&toolbox, &data, &cfg.weights, &opts)?
    };
    let dir = out_dir(cli, Path::new(DEFAULT_OUT))?;
    write_json(&dir.join("trace.json"), &sel.trace)?;
    write_outcome(&dir, &data, &sel.outcome)?;
    let lambda = sel
        .trace
        .lambda_star
        .map(|l| format!(", lambda {l}"))
        .unwrap_or_default();
    Ok(format!(
        "selected {}{lambda}; rejected {} of {} at alpha {}",
        sel.trace.selected_name,
        sel.outcome.rejection.len(),
        data.m(),
        cfg.alpha
    ))
}

const REPORT_CSV: &str = "report_long.csv";
const SUMMARY_TXT: &str = "summary.txt";

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            csv_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv")
            && path.file_name().is_some_and(|n| n != REPORT_CSV)
        {
            out.push(path);
        }
    }
    Ok(())
}

fn header_of(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("corrupt metrics file {}: {e}", path.display())))
}

/// Collects long-format rows; a wide metrics table is used only when its
/// directory has no long-format file.
pub fn collect_metrics(dir: &Path) -> Result<Vec<LongRow>> {
    if !dir.is_dir() {
        return Err(Error::InvalidConfig(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    csv_files(dir, &mut files)?;
    let mut long_files = Vec::new();
    let mut wide_files = Vec::new();
    for f in files {
        let header = header_of(&f)?;
        if header == LONG_HEADER {
            long_files.push(f);
        } else if header == METRICS_HEADER {
            wide_files.push(f);
        }
    }
    let mut rows = Vec::new();
    for f in &wide_files {
        if long_files.iter().any(|l| l.parent() == f.parent()) {
            continue;
        }
        rows.extend(long_rows(&read_rows::<MetricsRow>(f)?, ""));
    }
    for f in &long_files {
        rows.extend(read_rows::<LongRow>(f)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no metrics files found under {}",
            dir.display()
        )));
    }
    Ok(rows)
}

/// Text summary with one block per method.
pub fn summarize(rows: &[LongRow]) -> String {
    let mut by_method: BTreeMap<&str, Vec<&LongRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut text = String::new();
    for (method, rows) in by_method {
        text.push_str(&format!("method {method}\n"));
        for r in rows {
            let param = if r.param_value.is_empty() {
                String::new()
            } else {
                format!(" [{}]", r.param_value)
            };
            text.push_str(&format!(
                "  {:<4}{param} {:.4} (se {:.4})\n",
                r.metric, r.value, r.se
            ));
        }
    }
    text
}

fn cmd_report(cli: &Cli, dir: &Path) -> Result<String> {
    let rows = collect_metrics(dir)?;
    let out = out_dir(cli, dir)?;
    write_long_csv(BufWriter::new(File::create(out.join(REPORT_CSV))?), &rows)?;
    let summary = summarize(&rows);
    fs::write(out.join(SUMMARY_TXT), &summary)?;
    let methods = rows
        .iter()
        .map(|r| r.method.as_str())
        .collect::<std::collections::BTreeSet<_>>();
    Ok(format!(
        "report: {} methods, {} rows -> {}",
        methods.len(),
        rows.len(),
        out.display()
    ))
}

/// Executes a parsed command and returns the summary line.
pub fn run(cli: &Cli) -> Result<String> {
    let work = || match &cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Infer { data } => cmd_infer(cli, data),
        Command::Select { data, plus } => cmd_select(cli, data, *plus),
        Command::Report { dir } => cmd_report(cli, dir),
    };
    match cli.threads {
        Some(0) => Err(Error::InvalidConfig("threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// Exit status for an error: 2 for statistical failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_runtime_failure() {
        2
    } else {
        1
    }
}

/// Parses the process arguments, runs, and returns the exit status.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
