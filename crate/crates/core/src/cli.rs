//! `reidc` command line: `synth | train | compress | eval | sweep`.
//!
//! Every subcommand accepts `--config <file>` holding flat `key=value` lines
//! that mirror the flags. Values from the file override flags given on the
//! command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::bench::{emit_csv, emit_plot_data, parse_config, run_sweep, sweep_csv, QuantSetting, SweepConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{generate_synthetic, load_embeddings, split_query_gallery, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_config, evaluate_embeddings, EvalReport};
use crate::methods::MethodRegistry;
use crate::model::CompressionMode;
use crate::store::{quantize_uniform, read_store, size_report, write_store, Payload};
use crate::training::{write_training_log, TrainConfig, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "reidc", version, about = "Re-identification embedding compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-view identity dataset as an EMB1 f32 store.
    Synth(SynthArgs),
    /// Train one compression method and write a checkpoint.
    Train(TrainArgs),
    /// Convert an f32 store, optionally to int8 codes.
    Compress(CompressArgs),
    /// Evaluate retrieval on the held-out identities of a dataset.
    Eval(EvalArgs),
    /// Run the method x dim x quantization sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    ids: usize,
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long, default_value_t = 48)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    intrinsic_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Dataset store written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// One of the registered methods: full, slice, lowrank, prune.
    #[arg(long, default_value = "full")]
    mode: String,
    /// Stored embedding width; defaults to --embed-dim.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0.3)]
    margin: f32,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false, action = ArgAction::Set)]
    qat: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 96)]
    embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    prune_rounds: usize,
    #[arg(long, default_value_t = 0.2)]
    retrain_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    holdout_fraction: f64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct CompressArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false, action = ArgAction::Set)]
    quantize: bool,
    /// Accepted for interface uniformity; compression is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Checkpoint from `train`; without it the raw features are evaluated.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// full, slice, lowrank or prune; defaults to the checkpoint's own mode.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false, action = ArgAction::Set)]
    quantize: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit JSON instead of CSV.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false, action = ArgAction::Set)]
    json: bool,
    #[arg(long, default_value_t = 0.5)]
    holdout_fraction: f64,
    #[arg(long, default_value_t = 2)]
    queries_per_id: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, alias = "out")]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_plot: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    ids: usize,
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long, default_value_t = 48)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    intrinsic_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 96)]
    embed_dim: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0.3)]
    margin: f32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Comma-separated method names.
    #[arg(long, default_value = "slice,lowrank,prune")]
    methods: String,
    /// Comma-separated compressed widths.
    #[arg(long, default_value = "72,60,48,24,8,4")]
    dims: String,
    /// off, on or both.
    #[arg(long, default_value = "both")]
    quantization: String,
    #[arg(long, default_value_t = 5)]
    prune_rounds: usize,
    #[arg(long, default_value_t = 0.2)]
    retrain_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    holdout_fraction: f64,
    #[arg(long, default_value_t = 2)]
    queries_per_id: usize,
    /// Record per-cell wall time (makes the CSV non-reproducible).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false, action = ArgAction::Set)]
    timing: bool,
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code:
/// 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    match config_args(&argv) {
        Ok(extra) => argv.extend(extra),
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Turns `--config <file>` contents into trailing flags so they win over earlier ones.
fn config_args(argv: &[String]) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(parse_config(&text)?
        .into_iter()
        .filter(|(k, _)| k != "config")
        .flat_map(|(k, v)| [format!("--{k}"), v])
        .collect())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Compress(a) => compress(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let ds = generate_synthetic(&SynthConfig {
        num_identities: a.ids,
        views_per_identity: a.views,
        feature_dim: a.feature_dim,
        intrinsic_dim: a.intrinsic_dim,
        view_noise: a.noise,
        seed: a.seed,
    })?;
    let bytes = write_store(&a.out, &Payload::F32(ds.features().clone()), Some(&ds.labels_u32()))?;
    println!(
        "wrote {} samples ({} identities, dim {}) to {} ({bytes} bytes)",
        ds.len(),
        ds.num_identities(),
        ds.feature_dim(),
        a.out.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let (m, labels) = load_embeddings(path)?;
    Dataset::from_labeled(m, &labels)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (train_ds, _) = ds.train_eval_split(a.holdout_fraction)?;
    let registry = MethodRegistry::builtin();
    let method = registry.get(&a.mode)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        triplet_margin: a.margin,
        seed: a.seed,
        qat: a.qat,
        retrain_fraction: a.retrain_fraction,
        prune_rounds: a.prune_rounds,
        hidden_dim: a.hidden,
        embed_dim: a.embed_dim,
        ..TrainConfig::default()
    };
    let dim = a.dim.unwrap_or(a.embed_dim);
    let model = method.train(&train_ds, &cfg, dim)?;
    save_checkpoint(&a.out, &model)?;
    if let Some(log) = &a.log {
        write_training_log(log, &model.history)?;
    }
    let last = model.history.last().map_or(f64::NAN, |e| e.loss.total);
    println!(
        "trained {} ({}) for {} epochs, final loss {last:.6}; checkpoint {}",
        method.name(),
        model.mode,
        model.epochs_run(),
        a.out.display()
    );
    Ok(())
}

fn compress(a: CompressArgs) -> Result<()> {
    let (payload, labels) = read_store(&a.input)?;
    let m = payload.to_matrix();
    let (out, bits) = if a.quantize {
        (Payload::I8(quantize_uniform(&m)?), 8)
    } else {
        (Payload::F32(m), 32)
    };
    let bytes = write_store(&a.out, &out, labels.as_deref())?;
    let ratio = size_report(out.dim(), 32, out.dim(), bits)?.ratio;
    println!("wrote {} rows to {} ({bytes} bytes, {ratio}x)", out.rows(), a.out.display());
    Ok(())
}

fn resolve_mode(requested: Option<&str>, dim: Option<usize>, model: &TrainedModel) -> Result<CompressionMode> {
    let need_dim = || dim.ok_or_else(|| Error::Config("--dim is required for this mode".into()));
    match requested {
        None => Ok(model.mode.clone()),
        Some("full") => Ok(CompressionMode::Full),
        Some("slice") => Ok(CompressionMode::Slice(need_dim()?)),
        Some("lowrank") | Some("prune") if dim.is_some_and(|d| d != model.compressed_dim()) => Err(Error::Config(format!(
            "checkpoint stores {} dims, --dim asks for {}",
            model.compressed_dim(),
            dim.unwrap_or_default()
        ))),
        Some("lowrank") if matches!(model.mode, CompressionMode::LowRank(_)) => Ok(model.mode.clone()),
        Some("prune") if matches!(model.mode, CompressionMode::Pruned(_)) => Ok(model.mode.clone()),
        Some(other) => Err(Error::Config(format!(
            "cannot evaluate mode `{other}` on a {} checkpoint",
            model.mode
        ))),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (_, eval_ds) = ds.train_eval_split(a.holdout_fraction)?;
    let split = split_query_gallery(&eval_ds, a.queries_per_id, a.seed)?;
    let report = match &a.model {
        Some(path) => {
            let model = load_checkpoint(path)?;
            let mode = resolve_mode(a.mode.as_deref(), a.dim, &model)?;
            let mut rm = model.retrieval();
            if !matches!(mode, CompressionMode::LowRank(_)) {
                rm.head = None;
            }
            evaluate_config(rm, &split, &eval_ds, &mode, a.quantize)?
        }
        None => eval_raw(&a, &eval_ds, &split)?,
    };
    let text = if a.json {
        format!("{}\n", report.to_json())
    } else {
        format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row())
    };
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn eval_raw(a: &EvalArgs, ds: &Dataset, split: &crate::dataset::QueryGallerySplit) -> Result<EvalReport> {
    let f = ds.feature_dim();
    let cols: Vec<usize> = match a.mode.as_deref() {
        None | Some("full") => (0..f).collect(),
        Some("slice") => {
            let k = a.dim.ok_or_else(|| Error::Config("--dim is required for slice".into()))?;
            if k == 0 || k > f {
                return Err(Error::Config(format!("slice dim {k} outside [1, {f}]")));
            }
            (0..k).collect()
        }
        Some(other) => {
            return Err(Error::Config(format!("mode `{other}` needs a --model checkpoint")));
        }
    };
    let pick = |idx: &[usize]| ds.features().select_rows(idx).select_cols(&cols);
    let labels = |idx: &[usize]| idx.iter().map(|&i| ds.identities()[i]).collect::<Vec<_>>();
    evaluate_embeddings(
        &pick(&split.query_indices),
        &labels(&split.query_indices),
        &pick(&split.gallery_indices),
        &labels(&split.gallery_indices),
        f,
        a.quantize,
        None,
    )
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("bad {what} entry `{t}`"))))
        .collect()
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = SweepConfig {
        data: SynthConfig {
            num_identities: a.ids,
            views_per_identity: a.views,
            feature_dim: a.feature_dim,
            intrinsic_dim: a.intrinsic_dim,
            view_noise: a.noise,
            seed: a.seed,
        },
        holdout_fraction: a.holdout_fraction,
        queries_per_identity: a.queries_per_id,
        train: TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            triplet_margin: a.margin,
            seed: a.seed,
            retrain_fraction: a.retrain_fraction,
            prune_rounds: a.prune_rounds,
            hidden_dim: a.hidden,
            embed_dim: a.embed_dim,
            ..TrainConfig::default()
        },
        methods: parse_list(&a.methods, "method")?,
        dims: parse_list(&a.dims, "dim")?,
        quantization: a.quantization.parse::<QuantSetting>()?,
        timing: a.timing,
    };
    let rows = run_sweep(&cfg, &MethodRegistry::builtin())?;
    match &a.out_csv {
        Some(p) => {
            emit_csv(&rows, p)?;
        }
        None => {
            let _ = std::io::stdout().write_all(sweep_csv(&rows)?.as_bytes());
        }
    }
    if let Some(p) = &a.out_plot {
        emit_plot_data(&rows, p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_codes() {
        assert_eq!(cli_main(["reidc", "sweep", "--help"]), 0);
        assert_eq!(cli_main(["reidc", "synth"]), 2);
        assert_eq!(cli_main(["reidc", "synth", "--out", "x", "--bogus"]), 2);
        assert_eq!(cli_main(["reidc"]), 2);
    }

    #[test]
    fn config_file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        let out = dir.path().join("d.emb");
        std::fs::write(&cfg, format!("ids=3\nviews=2\nfeature_dim=4\nintrinsic_dim=2\nout={}\n", out.display())).unwrap();
        let code = cli_main([
            "reidc",
            "synth",
            "--ids",
            "50",
            "--config",
            cfg.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let (m, labels) = load_embeddings(&out).unwrap();
        assert_eq!(m.shape(), (6, 4));
        assert_eq!(labels, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "colour=blue\n").unwrap();
        assert_eq!(cli_main(["reidc", "synth", "--out", "x", "--config", cfg.to_str().unwrap()]), 2);
    }

    #[test]
    fn runtime_error_exit_code() {
        assert_eq!(cli_main(["reidc", "compress", "--in", "/nonexistent/file", "--out", "/tmp/x"]), 1);
    }
}
