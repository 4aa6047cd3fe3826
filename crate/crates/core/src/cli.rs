//! Command-line front end. `run` takes the argument list and output streams
//! so the binary and the tests drive the same code.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::embed_io::{
    encode_run_record, read_embeddings, read_labels, read_labels_for, read_run_record,
    write_embeddings, write_labels_binary, write_run_record, write_trajectory_csv,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_grad_check, GradCheckConfig, REL_TOLERANCE};
use crate::losses::{superpool, LossKind};
use crate::metrics::{report, PairwiseOptions, UniformityParams, DEFAULT_MAX_EXACT_ROWS, DEFAULT_UNIFORMITY_T};
use crate::numerics::{normalize_rows, EPSILON_NORM};
use crate::record::RunRecord;
use crate::toy::mlp::DEFAULT_HIDDEN;
use crate::toy::{run_toy_with, Snapshot, SphereDataset, ToyConfig, DEFAULT_CLUSTER_CONCENTRATION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "reldistill", version, about = "Distillation losses, sphere metrics and the toy experiment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy student once and write its run record.
    ToyRun(ToyRunArgs),
    /// Uniformity, tolerance and modality gap of EMB1 embedding dumps.
    Metrics(MetricsArgs),
    /// Evaluate a loss on two EMB1 dumps.
    LossEval(LossEvalArgs),
    /// Finite-difference check of the analytic gradients.
    GradCheck(GradCheckArgs),
    /// Run the toy experiment over a list of values of one parameter.
    Sweep(SweepArgs),
    /// Replay a run record and write its checkpoint predictions as EMB1 files.
    ExportSnapshots(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ToyFlags {
    /// Number of target clusters (1 and 3 are the reference settings).
    #[arg(long, default_value_t = 1)]
    pub clusters: usize,
    /// contrastive, similarity, relational, cross or intra.
    #[arg(long, default_value = "relational")]
    pub loss: String,
    /// Contrastive temperature.
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    /// Training steps [default: 50000 for one cluster, 100000 otherwise].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Dataset size [default: 1000 for one cluster, 500 per cluster otherwise].
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    /// Spread of the target clusters; larger is tighter.
    #[arg(long, default_value_t = DEFAULT_CLUSTER_CONCENTRATION)]
    pub concentration: f64,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Uniformity kernel scale.
    #[arg(long = "t", default_value_t = DEFAULT_UNIFORMITY_T)]
    pub uniformity_t: f64,
}

impl ToyFlags {
    pub fn resolve(&self) -> Result<ToyConfig> {
        let loss = LossKind::parse(&self.loss, self.temperature)?;
        let mut cfg = ToyConfig::defaults_for(self.clusters, loss);
        if self.clusters != 1 && self.clusters != 3 {
            cfg.n_points = 500 * self.clusters;
        }
        if let Some(n) = self.points {
            cfg.n_points = n;
        }
        if let Some(it) = self.iterations {
            cfg.iterations = it;
        }
        cfg.learning_rate = self.lr;
        cfg.seed = self.seed;
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.cluster_concentration = self.concentration;
        cfg.hidden = self.hidden;
        cfg.uniformity_t = self.uniformity_t;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ToyRunArgs {
    #[command(flatten)]
    pub toy: ToyFlags,
    /// Run record path; the trajectory CSV goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the predictions at every checkpoint (needs --out).
    #[arg(long)]
    pub snapshots: bool,
    /// Do not print checkpoints to stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub k: PathBuf,
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Text or LBL1 labels paired with the rows of --k.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_UNIFORMITY_T)]
    pub t: f64,
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Above this many rows, pairwise metrics use a seeded subsample.
    #[arg(long, default_value_t = DEFAULT_MAX_EXACT_ROWS)]
    pub max_exact_rows: usize,
    #[arg(long, default_value_t = 0)]
    pub subsample_seed: u64,
}

#[derive(Debug, Args)]
pub struct LossEvalArgs {
    /// Student features.
    #[arg(long)]
    pub k: PathBuf,
    /// Teacher features.
    #[arg(long)]
    pub q: PathBuf,
    #[arg(long, default_value = "relational")]
    pub loss: String,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    /// Group ids; rows of both matrices are average-pooled per group first.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Write value and gradient as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value = "relational")]
    pub loss: String,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check the whole student chain with this hidden width instead of the loss alone.
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Temperature,
    Seed,
    Loss,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<String>,
    #[command(flatten)]
    pub toy: ToyFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::ToyRun(a) => toy_run(a, out, err),
        Command::Metrics(a) => metrics(a, out, err),
        Command::LossEval(a) => loss_eval(a, out),
        Command::GradCheck(a) => grad_check(a, out),
        Command::Sweep(a) => sweep(a, out, err),
        Command::ExportSnapshots(a) => export_snapshots(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn echo_config(out: &mut dyn Write, config: &impl Serialize) -> Result<()> {
    writeln!(out, "config: {}", serde_json::to_string(config)?)?;
    Ok(())
}

fn usage(message: impl Into<String>) -> Error {
    Error::InvalidConfig(message.into())
}

pub fn csv_path_for(record_path: &Path) -> PathBuf {
    record_path.with_extension("csv")
}

pub fn snapshot_dir_for(record_path: &Path) -> PathBuf {
    let stem = record_path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    record_path.with_file_name(format!("{stem}_snapshots"))
}

pub fn snapshot_file_name(iteration: u64) -> String {
    format!("iter_{iteration:08}.emb")
}

/// Writes one EMB1 file per snapshot plus the targets and their labels.
pub fn write_snapshots(dir: &Path, config: &ToyConfig, snapshots: &[Snapshot]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let data = SphereDataset::generate(
        config.n_points,
        config.clusters,
        config.cluster_concentration,
        config.seed,
        UniformityParams::new(config.uniformity_t)?,
    )?;
    write_embeddings(dir.join("targets.emb"), &data.targets)?;
    write_labels_binary(dir.join("labels.lbl"), &data.labels)?;
    for s in snapshots {
        write_embeddings(dir.join(snapshot_file_name(s.iteration)), &s.points)?;
    }
    Ok(())
}

fn toy_run(a: ToyRunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = a.toy.resolve()?;
    if a.snapshots && a.out.is_none() {
        return Err(usage("--snapshots needs --out"));
    }
    echo_config(out, &cfg)?;
    let quiet = a.quiet;
    let outcome = run_toy_with(&cfg, a.snapshots, |c| {
        if !quiet {
            let _ = writeln!(
                err,
                "iteration={} loss={:.6} U={:.6} T={:.6} G={:.6}",
                c.iteration, c.loss, c.uniformity, c.tolerance, c.modality_gap
            );
        }
    })?;
    let record = &outcome.record;
    if let Some(path) = &a.out {
        write_run_record(path, record)?;
        write_trajectory_csv(csv_path_for(path), record)?;
        if a.snapshots {
            write_snapshots(&snapshot_dir_for(path), &cfg, &outcome.snapshots)?;
        }
    }
    writeln!(
        out,
        "source U={:.6} T={:.6}",
        record.source.uniformity, record.source.tolerance
    )?;
    writeln!(out, "{}", record.summary_line())?;
    Ok(EXIT_OK)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |v| format!("{v:.6}"))
}

fn metrics(a: MetricsArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let params = UniformityParams::new(a.t)?;
    let opts = PairwiseOptions {
        max_exact_rows: a.max_exact_rows,
        subsample_seed: a.subsample_seed,
    };
    let normalization = format!("l2 row normalization (rows with norm < {EPSILON_NORM:e} rejected)");
    echo_config(
        out,
        &json!({
            "k": a.k, "q": a.q, "labels": a.labels, "t": a.t,
            "max_exact_rows": a.max_exact_rows, "subsample_seed": a.subsample_seed,
            "normalization": normalization,
        }),
    )?;

    let k = normalize_rows(&read_embeddings(&a.k)?)?;
    let q = a.q.as_ref().map(|p| read_embeddings(p).and_then(|m| normalize_rows(&m))).transpose()?;
    let labels = a.labels.as_ref().map(|p| read_labels_for(p, k.rows())).transpose()?;

    let k_report = report(&k, q.as_ref(), labels.as_ref(), params, opts)?;
    let q_labels = labels.as_ref().filter(|l| q.as_ref().is_some_and(|q| q.rows() == l.len()));
    let q_report = q
        .as_ref()
        .map(|q| report(q, None, q_labels, params, opts))
        .transpose()?;

    if labels.is_some() && k_report.tolerance.is_none() {
        writeln!(err, "warning: no two rows of --k share a label; tolerance is null")?;
    }
    writeln!(
        out,
        "k: U={:.6} T={} G={}",
        k_report.uniformity,
        fmt_opt(k_report.tolerance),
        fmt_opt(k_report.modality_gap_norm)
    )?;
    if let Some(r) = &q_report {
        writeln!(out, "q: U={:.6} T={}", r.uniformity, fmt_opt(r.tolerance))?;
    }
    if let Some(path) = &a.out {
        let doc = json!({
            "normalization": normalization,
            "uniformity_t": a.t,
            "k": k_report,
            "q": q_report,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(EXIT_OK)
}

fn loss_eval(a: LossEvalArgs, out: &mut dyn Write) -> Result<i32> {
    let loss = LossKind::parse(&a.loss, a.temperature)?;
    echo_config(
        out,
        &json!({ "k": a.k, "q": a.q, "loss": loss, "groups": a.groups }),
    )?;
    let mut k = read_embeddings(&a.k)?;
    let mut q = read_embeddings(&a.q)?;
    if let Some(path) = &a.groups {
        let groups = read_labels(path)?;
        k = superpool(&k, &groups)?;
        q = superpool(&q, &groups)?;
    }
    let k = normalize_rows(&k)?;
    let q = normalize_rows(&q)?;
    let result = loss.evaluate(&k, &q)?;
    writeln!(out, "loss={}", result.value)?;
    if let Some(path) = &a.out {
        let doc = json!({
            "loss": loss,
            "rows": k.rows(),
            "value": result.value,
            "grad_k": result.grad_k,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(EXIT_OK)
}

fn grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradCheckConfig {
        loss: LossKind::parse(&a.loss, a.temperature)?,
        n: a.n,
        c: a.c,
        trials: a.trials,
        seed: a.seed,
        mlp_hidden: a.mlp_hidden,
    };
    cfg.validate()?;
    echo_config(out, &cfg)?;
    let r = run_grad_check(&cfg)?;
    writeln!(
        out,
        "checked={} skipped_kinks={} max_rel_error={:.3e} worst_seed={}",
        r.checked,
        r.skipped_kinks,
        r.max_rel_error,
        r.worst_seed.map_or_else(|| "none".into(), |s| s.to_string())
    )?;
    if r.passed() {
        writeln!(out, "pass")?;
        Ok(EXIT_OK)
    } else if let Some(f) = r.failures.first() {
        writeln!(
            out,
            "FAIL: rel error {:.3e} >= {REL_TOLERANCE:e} at seed {} ({} failing instances)",
            f.rel_error,
            f.seed,
            r.failures.len()
        )?;
        Ok(EXIT_RUNTIME)
    } else {
        writeln!(out, "FAIL: every instance was kink-adjacent")?;
        Ok(EXIT_RUNTIME)
    }
}

/// Thread cap for sweeps: `RD_THREADS`, else the number of logical CPUs.
pub fn sweep_threads() -> Result<usize> {
    match std::env::var("RD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("RD_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn file_safe(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn sweep_record_path(dir: &Path, param: SweepParam, value: &str) -> PathBuf {
    let name = match param {
        SweepParam::Temperature => "temperature",
        SweepParam::Seed => "seed",
        SweepParam::Loss => "loss",
    };
    dir.join(format!("run_{name}_{}.json", file_safe(value)))
}

pub const SWEEP_CSV_HEADER: &str = "value,delta_uniformity,delta_tolerance,modality_gap,status";

fn sweep_config(base: &ToyFlags, param: SweepParam, value: &str) -> Result<ToyConfig> {
    let mut flags = base.clone();
    match param {
        SweepParam::Temperature => {
            flags.temperature = f64::from_str(value)
                .map_err(|_| usage(format!("temperature `{value}` is not a number")))?;
            if !flags.loss.starts_with("contrastive") {
                return Err(usage("a temperature sweep needs --loss contrastive"));
            }
        }
        SweepParam::Seed => {
            flags.seed = u64::from_str(value)
                .map_err(|_| usage(format!("seed `{value}` is not a non-negative integer")))?;
        }
        SweepParam::Loss => flags.loss = value.to_string(),
    }
    flags.resolve()
}

fn sweep(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let values: Vec<String> = a
        .values
        .iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(usage("--values is empty"));
    }
    let configs = values
        .iter()
        .map(|v| sweep_config(&a.toy, a.param, v))
        .collect::<Result<Vec<_>>>()?;
    let threads = sweep_threads()?;
    echo_config(
        out,
        &json!({ "param": a.param, "values": values, "threads": threads, "runs": configs }),
    )?;
    std::fs::create_dir_all(&a.out)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {threads} threads: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        use rayon::prelude::*;
        configs
            .par_iter()
            .zip(values.par_iter())
            .map(|(cfg, v)| {
                let record = run_toy_with(cfg, false, |_| {})?.record;
                let path = sweep_record_path(&a.out, a.param, v);
                write_run_record(&path, &record)?;
                write_trajectory_csv(csv_path_for(&path), &record)?;
                Ok(record)
            })
            .collect()
    });

    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    let mut failed = 0;
    for (v, r) in values.iter().zip(&results) {
        match r {
            Ok(rec) => {
                let s = &rec.summary;
                csv.push_str(&format!(
                    "{v},{},{},{},ok\n",
                    s.delta_uniformity, s.delta_tolerance, s.final_modality_gap
                ));
                writeln!(out, "value={v} {}", rec.summary_line())?;
            }
            Err(e) => {
                failed += 1;
                csv.push_str(&format!("{v},,,,failed\n"));
                writeln!(out, "value={v} failed")?;
                writeln!(err, "error: run {v}: {e}")?;
            }
        }
    }
    std::fs::write(a.out.join("aggregate.csv"), csv)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn export_snapshots(a: ExportArgs, out: &mut dyn Write) -> Result<i32> {
    let archived = read_run_record(&a.record)?;
    echo_config(out, &archived.config)?;
    let replay = run_toy_with(&archived.config, true, |_| {})?;
    if encode_run_record(&replay.record)? != encode_run_record(&archived)? {
        return Err(Error::InvariantViolation(
            "replaying the recorded config does not reproduce the record".into(),
        ));
    }
    write_snapshots(&a.out, &archived.config, &replay.snapshots)?;
    writeln!(out, "replay verified; wrote {} snapshots", replay.snapshots.len())?;
    Ok(EXIT_OK)
}
