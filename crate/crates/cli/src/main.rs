use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use srvcc::data::{load_matrix, preprocess, write_atomic, write_matrix, CsvFormat, DataMatrix, Preprocess};
use srvcc::export::{export_cocluster, export_embeddings};
use srvcc::metrics::{accuracy_hungarian, nmi};
use srvcc::synth::{synth_checkerboard, SyntheticSpec};
use srvcc::trainer::{with_threads, Checkpoint, CoClusterResult, Trainer};
use srvcc::{ErrorCategory, LossBreakdown, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "srvcc", version, about = "Variational co-clustering of data matrices")]
struct Cli {
    /// Log progress (repeat for more detail)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a matrix and write memberships, loss trace and checkpoint
    Fit(FitArgs),
    /// Generate a noisy checkerboard matrix with known blocks
    Synth(SynthArgs),
    /// Compare predicted labels against reference labels
    Eval(EvalArgs),
    /// Write a block-ordered matrix or latent coordinates from a checkpoint
    Export(ExportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    CsvDense,
    LabeledCsv,
}

impl From<Format> for CsvFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::CsvDense => CsvFormat::CsvDense,
            Format::LabeledCsv => CsvFormat::LabeledCsv,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Prep {
    None,
    Minmax01,
    TfidfL2,
}

impl From<Prep> for Preprocess {
    fn from(p: Prep) -> Self {
        match p {
            Prep::None => Preprocess::None,
            Prep::Minmax01 => Preprocess::Minmax01,
            Prep::TfidfL2 => Preprocess::TfidfL2,
        }
    }
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Input matrix (CSV, empty cell = missing)
    #[arg(long)]
    input: PathBuf,

    #[arg(long, value_enum, default_value = "csv-dense")]
    format: Format,

    #[arg(long, value_enum, default_value = "none")]
    preprocess: Prep,
}

impl InputArgs {
    fn load(&self) -> Result<DataMatrix> {
        let m = load_matrix(&self.input, self.format.into())
            .with_context(|| format!("reading {}", self.input.display()))?;
        Ok(preprocess(&m, self.preprocess.into())?)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,

    /// TOML file with training settings; any field may be given
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set lambda9=0.5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Row clusters
    #[arg(long)]
    g: Option<usize>,

    /// Column clusters
    #[arg(long)]
    m: Option<usize>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    pretrain_epochs: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    /// two_stage, simple_cascade or feature_only
    #[arg(long)]
    mode: Option<String>,

    /// Use the plain importance-weighted gradient
    #[arg(long)]
    no_dreg: bool,

    /// Worker threads (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,

    /// Fraction of observed cells withheld to track reconstruction error
    #[arg(long)]
    holdout: Option<f64>,

    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML file with generator settings
    #[arg(long)]
    spec: Option<PathBuf>,

    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    missing: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted labels (one per line, or `index,label` CSV)
    #[arg(long)]
    pred: PathBuf,

    /// Reference labels in the same layout
    #[arg(long = "true")]
    truth: PathBuf,

    /// Directory for metrics.txt and summary.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ExportMode {
    Cocluster,
    Embeddings,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// The matrix the checkpoint was trained on, loaded as for `fit`
    #[command(flatten)]
    input: InputArgs,

    #[arg(long, value_enum)]
    mode: ExportMode,

    /// Output path (CSV); companion files are written next to it
    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    threads: Option<usize>,
}

/// Failure caused by how the program was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<srvcc::Error>() {
            return match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a plain string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("override {s:?} is not KEY=VALUE")))?;
    let key = k.trim().to_string();
    let raw = v.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed above"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn build_config(args: &FitArgs) -> Result<TrainConfig> {
    let mut table = match &args.config {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for o in &args.overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    let mut set = |k: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(k.to_string(), v);
        }
    };
    set("g", args.g.map(|v| toml::Value::Integer(v as i64)));
    set("m", args.m.map(|v| toml::Value::Integer(v as i64)));
    set("max_epochs", args.epochs.map(|v| toml::Value::Integer(v as i64)));
    set(
        "pretrain_epochs",
        args.pretrain_epochs.map(|v| toml::Value::Integer(v as i64)),
    );
    set("seed", args.seed.map(|v| toml::Value::Integer(v as i64)));
    set("mode", args.mode.clone().map(toml::Value::String));
    set("dreg", args.no_dreg.then_some(toml::Value::Boolean(false)));
    set("threads", args.threads.map(|v| toml::Value::Integer(v as i64)));
    set("holdout", args.holdout.map(toml::Value::Float));
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn labels_csv(labels: &[usize], names: Option<&Vec<String>>) -> String {
    let mut out = String::from(if names.is_some() {
        "index,name,label\n"
    } else {
        "index,label\n"
    });
    for (i, l) in labels.iter().enumerate() {
        match names {
            Some(n) => writeln!(out, "{i},{},{l}", n[i]),
            None => writeln!(out, "{i},{l}"),
        }
        .expect("writing to a String");
    }
    out
}

fn loss_trace_csv(trace: &[LossBreakdown], holdout: &[f64]) -> String {
    let mut out = String::from(
        "epoch,row_norm,row_elbo,row_contrastive,col_norm,col_elbo,col_contrastive,cell_elbo,cell_contrastive,cross_loss,total",
    );
    if !holdout.is_empty() {
        out.push_str(",holdout_mse");
    }
    out.push('\n');
    for (k, l) in trace.iter().enumerate() {
        let _ = write!(out, "{}", l.epoch);
        for v in l.terms().iter().chain([&l.total]) {
            let _ = write!(out, ",{v}");
        }
        if let Some(h) = holdout.get(k) {
            let _ = write!(out, ",{h}");
        }
        out.push('\n');
    }
    out
}

/// `key=value` lines plus the same pairs as JSON.
fn write_report(dir: &Path, pairs: &[(&str, serde_json::Value)]) -> Result<()> {
    let mut text = String::new();
    let mut map = serde_json::Map::new();
    for (k, v) in pairs {
        let shown = match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let _ = writeln!(text, "{k}={shown}");
        map.insert((*k).to_string(), v.clone());
    }
    write_atomic(&dir.join("metrics.txt"), text.as_bytes())?;
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&map)?)?;
    Ok(())
}

fn json<T: Serialize>(v: T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let config = build_config(args)?;
    let matrix = args.input.load()?;
    log::info!(
        "loaded {}×{} matrix, {} observed cells",
        matrix.n(),
        matrix.d(),
        matrix.present_count()
    );
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let abort_path = args.out.join("checkpoint.last_good.json");
    let threads = config.threads;
    let (result, trainer): (CoClusterResult, Trainer) = with_threads(threads, || -> Result<_> {
        let mut t = Trainer::new(&matrix, config)?;
        let r = t.run(Some(&abort_path))?;
        Ok((r, t))
    })??;
    trainer.checkpoint().save(&args.out.join("checkpoint.json"))?;
    write_atomic(&args.out.join("result.json"), &serde_json::to_vec(&result)?)?;
    write_atomic(
        &args.out.join("row_labels.csv"),
        labels_csv(&result.row_labels, matrix.row_labels.as_ref()).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("col_labels.csv"),
        labels_csv(&result.col_labels, matrix.col_labels.as_ref()).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("loss_trace.csv"),
        loss_trace_csv(&result.loss_trace, &result.holdout_mse).as_bytes(),
    )?;
    let last = result.loss_trace.last();
    let mut pairs = vec![
        ("n", json(matrix.n())),
        ("d", json(matrix.d())),
        ("g", json(trainer.config().g)),
        ("m", json(trainer.config().m)),
        ("mode", json(trainer.config().mode)),
        ("epochs", json(result.epochs)),
        ("stopped_early", json(result.stopped_early)),
        ("final_total", json(last.map(|l| l.total))),
        ("final_cross_loss", json(last.map(|l| l.cross_loss))),
    ];
    if let Some(h) = result.holdout_mse.last() {
        pairs.push(("final_holdout_mse", json(h)));
    }
    write_report(&args.out, &pairs)?;
    println!("trained {} epochs; results in {}", result.epochs, args.out.display());
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut table = match &args.spec {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    let defaults = toml::Table::try_from(SyntheticSpec::default()).expect("spec serializes");
    for (k, v) in defaults {
        table.entry(k).or_insert(v);
    }
    let mut set = |k: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(k.to_string(), v);
        }
    };
    set("n", args.n.map(|v| toml::Value::Integer(v as i64)));
    set("d", args.d.map(|v| toml::Value::Integer(v as i64)));
    set("g", args.g.map(|v| toml::Value::Integer(v as i64)));
    set("m", args.m.map(|v| toml::Value::Integer(v as i64)));
    set("separation", args.separation.map(toml::Value::Float));
    set("noise_level", args.noise.map(toml::Value::Float));
    set("missing_fraction", args.missing.map(toml::Value::Float));
    set("seed", args.seed.map(|v| toml::Value::Integer(v as i64)));
    let spec: SyntheticSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("invalid generator settings: {e}")))?;
    let s = synth_checkerboard(&spec)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_matrix(&s.matrix, &args.out.join("matrix.csv"))?;
    write_atomic(
        &args.out.join("row_labels.csv"),
        labels_csv(&s.row_labels, None).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("col_labels.csv"),
        labels_csv(&s.col_labels, None).as_bytes(),
    )?;
    println!("wrote {}×{} matrix to {}", spec.n, spec.d, args.out.display());
    Ok(())
}

/// Labels from the last field of each line; a non-numeric first line is
/// taken as a header.
fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let field = line.rsplit(',').next().unwrap_or("").trim();
        match field.parse::<usize>() {
            Ok(v) => out.push(v),
            Err(_) if k == 0 => continue,
            Err(_) => {
                return Err(anyhow!(srvcc::Error::InvalidData(format!(
                    "{} line {}: {field:?} is not a label",
                    path.display(),
                    k + 1
                ))))
            }
        }
    }
    if out.is_empty() {
        return Err(anyhow!(srvcc::Error::EmptyFile)).with_context(|| path.display().to_string());
    }
    Ok(out)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let pred = read_labels(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    let acc = accuracy_hungarian(&pred, &truth)?;
    let score = nmi(&pred, &truth)?;
    let pairs = [("n", json(pred.len())), ("acc", json(acc)), ("nmi", json(score))];
    for (k, v) in &pairs {
        println!("{k}={v}");
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_report(dir, &pairs)?;
    }
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let threads = args.threads.unwrap_or(ckpt.config.threads);
    let matrix = args.input.load()?;
    with_threads(threads, || -> Result<()> {
        let mut trainer = Trainer::from_checkpoint(&matrix, ckpt)?;
        let result = trainer.assignments(false)?;
        match args.mode {
            ExportMode::Cocluster => {
                export_cocluster(&matrix, &result, &args.out)?;
            }
            ExportMode::Embeddings => {
                export_embeddings(&trainer, &result, &args.out)?;
            }
        }
        Ok(())
    })??;
    println!("exported to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Synth(a) => run_synth(a),
        Command::Eval(a) => run_eval(a),
        Command::Export(a) => run_export(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed() {
        assert_eq!(parse_override("g=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("lambda9 = 0.5").unwrap().1, toml::Value::Float(0.5));
        assert_eq!(parse_override("dreg=false").unwrap().1, toml::Value::Boolean(false));
        assert_eq!(
            parse_override("mode=feature_only").unwrap().1,
            toml::Value::String("feature_only".into())
        );
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn exit_codes_follow_error_category() {
        assert_eq!(exit_code(&usage("x")), 1);
        assert_eq!(exit_code(&anyhow!(srvcc::Error::InvalidConfig("x".into()))), 1);
        assert_eq!(exit_code(&anyhow!(srvcc::Error::EmptyFile)), 2);
        assert_eq!(
            exit_code(&anyhow!(srvcc::Error::NonFinite("x".into())).context("during fit")),
            3
        );
    }

    #[test]
    fn trace_csv_has_one_line_per_epoch() {
        let t = vec![LossBreakdown::default(); 3];
        let s = loss_trace_csv(&t, &[0.1, 0.2, 0.3]);
        assert_eq!(s.lines().count(), 4);
        assert!(s.lines().next().unwrap().ends_with("holdout_mse"));
    }
}
