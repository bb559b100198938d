use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use nestrec::checkpoint::{peek_precision, Checkpoint};
use nestrec::data::{
    preprocess, synth_generate, Dataset, ImagePolicy, PreprocessOptions, Split, SynthConfig,
    TextTemplate,
};
use nestrec::matryoshka::{memory_report, ratio_f64, MemoryReport, SizeLadder};
use nestrec::model::extract_submodel;
use nestrec::train::{
    evaluate_sizes, history_tsv, popularity_baseline, size_curve, train, EvalOptions,
    MetricsReport, StopReason, TrainConfig, METRIC_NAMES,
};
use nestrec::{Error, Precision, Result, Scalar};

#[derive(Parser, Debug)]
#[command(
    name = "nestrec",
    version,
    about = "Nested multi-size sequential recommender"
)]
struct Cli {
    /// Random seed (overrides the config file for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point width for training: 32 or 64.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Omit the timestamp header from text outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Raw interaction log and metadata to a dataset directory.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train one nested model covering every ladder size.
    Train(TrainArgs),
    /// Ranking metrics of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Write a standalone checkpoint for one size.
    Extract(ExtractArgs),
    /// Extract and evaluate every size; writes a table and per-metric series.
    Curve(CurveArgs),
    /// Parameter and activation memory of nested vs independent training.
    AnalyzeMemory(MemoryArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Tab-separated `user, item, timestamp` lines (gzip accepted).
    #[arg(long)]
    interactions: PathBuf,
    /// JSON-lines item metadata (gzip accepted).
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Text embeddings, one row per metadata record.
    #[arg(long)]
    text_emb: Option<PathBuf>,
    /// Image embeddings, one row per metadata record with an `image_ref`.
    #[arg(long)]
    image_emb: Option<PathBuf>,
    /// What to do with items lacking an image: zero or exclude.
    #[arg(long, default_value = "zero")]
    image_policy: ImagePolicy,
    /// Keep items with missing metadata.
    #[arg(long)]
    keep_incomplete: bool,
    /// Minimum interactions per user and per item.
    #[arg(long, default_value_t = 5)]
    core: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    /// Probability of a random jump instead of the hidden successor.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    text_dim: usize,
    #[arg(long, default_value_t = 32)]
    image_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override a config entry, e.g. `--set d=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Size to evaluate; all ladder sizes if omitted.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    exclude_seen: bool,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    exclude_seen: bool,
    /// Output directory for `curve.tsv` and `series_<metric>.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MemoryArgs {
    #[arg(long)]
    layers: u64,
    #[arg(long)]
    gamma: u64,
    #[arg(long)]
    batch: u64,
    #[arg(long = "len")]
    seq_len: u64,
    /// Explicit ladder, e.g. `2..512` or `128,256,512`.
    #[arg(long)]
    ladder: Option<SizeLadder>,
    /// Largest size when no ladder is given.
    #[arg(long, short = 'd')]
    d: Option<usize>,
    /// Smallest size when no ladder is given.
    #[arg(long, default_value_t = 2)]
    ladder_min: usize,
}

struct Ctx {
    seed: Option<u64>,
    precision: Option<Precision>,
    deterministic: bool,
}

impl Ctx {
    fn header(&self) -> String {
        if self.deterministic {
            String::new()
        } else {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("# generated at unix time {secs}\n")
        }
    }

    fn write_text(&self, path: &Path, body: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, format!("{}{body}", self.header())).map_err(|e| Error::io(path, e))
    }

    fn save_dataset(&self, data: &Dataset, dir: &Path) -> Result<()> {
        data.save(dir)?;
        self.write_text(&dir.join("manifest.txt"), &data.manifest.to_text())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let ctx = Ctx {
        seed: cli.seed,
        precision: cli.precision,
        deterministic: cli.deterministic,
    };
    match run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Param(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(ctx: &Ctx, cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(ctx, a),
        Command::Synth(a) => cmd_synth(ctx, a),
        Command::Train(a) => {
            let cfg = train_config(ctx, &a)?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(ctx, &a, &cfg),
                Precision::F64 => cmd_train::<f64>(ctx, &a, &cfg),
            }
        }
        Command::Evaluate(a) => match peek_precision(&a.checkpoint)? {
            Precision::F32 => cmd_evaluate::<f32>(ctx, &a),
            Precision::F64 => cmd_evaluate::<f64>(ctx, &a),
        },
        Command::Extract(a) => match peek_precision(&a.checkpoint)? {
            Precision::F32 => cmd_extract::<f32>(&a),
            Precision::F64 => cmd_extract::<f64>(&a),
        },
        Command::Curve(a) => match peek_precision(&a.checkpoint)? {
            Precision::F32 => cmd_curve::<f32>(ctx, &a),
            Precision::F64 => cmd_curve::<f64>(ctx, &a),
        },
        Command::AnalyzeMemory(a) => cmd_memory(&a),
    }
}

fn cmd_preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<()> {
    let opts = PreprocessOptions {
        interactions: a.interactions,
        metadata: a.metadata,
        text_embeddings: a.text_emb,
        image_embeddings: a.image_emb,
        image_policy: a.image_policy,
        require_metadata: !a.keep_incomplete,
        template: TextTemplate::default(),
        core: a.core,
    };
    let data = preprocess(&opts)?;
    ctx.save_dataset(&data, &a.out)?;
    println!(
        "{} users, {} items, {} interactions -> {}",
        data.seqs.num_users(),
        data.num_items(),
        data.seqs.num_interactions(),
        a.out.display()
    );
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.users, a.items, a.noise, ctx.seed.unwrap_or(0));
    cfg.min_len = a.min_len;
    cfg.max_len = a.max_len;
    cfg.text_dim = a.text_dim;
    cfg.image_dim = a.image_dim;
    let data = synth_generate(&cfg)?;
    ctx.save_dataset(&data, &a.out)?;
    println!(
        "{} users, {} items, {} interactions -> {}",
        data.seqs.num_users(),
        data.num_items(),
        data.seqs.num_interactions(),
        a.out.display()
    );
    Ok(())
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(p) = ctx.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train<T: Scalar>(ctx: &Ctx, a: &TrainArgs, cfg: &TrainConfig) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    cfg.model_config(&data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let quiet = a.quiet;
    let outcome = train::<T>(cfg, &data, |r| {
        if !quiet {
            let per: Vec<String> = r
                .valid_ndcg10
                .iter()
                .map(|(m, v)| format!("{m}:{v:.4}"))
                .collect();
            eprintln!(
                "epoch {:>3}  loss {:.4}  valid NDCG@10 {}",
                r.epoch,
                r.train_loss,
                per.join(" ")
            );
        }
    })?;
    let ckpt = a.out.join("model.ckpt");
    outcome.best.save(&ckpt)?;
    ctx.write_text(&a.out.join("history.tsv"), &history_tsv(&outcome.history))?;
    ctx.write_text(&a.out.join("config.txt"), &cfg.to_text())?;
    let sizes = outcome.best.model.config.ladder.sizes().to_vec();
    let opts = EvalOptions {
        batch_size: cfg.eval_batch_size,
        exclude_seen: cfg.exclude_seen,
    };
    let report = MetricsReport {
        split: Split::Valid,
        epoch: Some(outcome.best_epoch),
        rows: evaluate_sizes(&outcome.best.model, &data, Split::Valid, &sizes, opts)?,
    };
    ctx.write_text(&a.out.join("valid_metrics.tsv"), &report.table())?;
    println!(
        "best epoch {} of {} ({})",
        outcome.best_epoch,
        outcome.history.len(),
        stop_text(&outcome.stop)
    );
    print!("{}", report.table());
    println!("checkpoint: {}", ckpt.display());
    if let StopReason::Diverged(msg) = outcome.stop {
        return Err(Error::NonFinite(format!(
            "training diverged ({msg}); best checkpoint kept"
        )));
    }
    Ok(())
}

fn stop_text(s: &StopReason) -> String {
    match s {
        StopReason::MaxEpochs => "reached max_epochs".into(),
        StopReason::EarlyStopped => "early stopped".into(),
        StopReason::Diverged(m) => format!("diverged: {m}"),
    }
}

fn cmd_evaluate<T: Scalar>(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let sizes = match a.size {
        Some(m) => vec![m],
        None => ck.model.config.ladder.sizes().to_vec(),
    };
    let opts = EvalOptions {
        exclude_seen: a.exclude_seen,
        ..EvalOptions::default()
    };
    let report = MetricsReport {
        split: a.split,
        epoch: None,
        rows: evaluate_sizes(&ck.model, &data, a.split, &sizes, opts)?,
    };
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        ctx.write_text(out, &table)?;
    }
    Ok(())
}

fn cmd_extract<T: Scalar>(a: &ExtractArgs) -> Result<()> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let sub = extract_submodel(&ck.model, a.size)?;
    let params = sub.matrix_param_count();
    let mut out = Checkpoint::new(sub);
    out.extra = ck.extra.clone();
    out.extra.set("extracted_from_width", ck.model.config.width);
    out.save(&a.out)?;
    println!(
        "size {} ({} matrix entries) -> {}",
        a.size,
        params,
        a.out.display()
    );
    Ok(())
}

fn cmd_curve<T: Scalar>(ctx: &Ctx, a: &CurveArgs) -> Result<()> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let opts = EvalOptions {
        exclude_seen: a.exclude_seen,
        ..EvalOptions::default()
    };
    let report = size_curve(&ck.model, &data, a.split, opts)?;
    let pop = popularity_baseline(&data, a.split, a.exclude_seen);
    let table = report.table();
    ctx.write_text(&a.out.join("curve.tsv"), &table)?;
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let file = format!("series_{}.tsv", name.to_lowercase().replace('@', ""));
        ctx.write_text(&a.out.join(file), &report.series(i))?;
    }
    print!("{table}");
    println!(
        "popularity\tNDCG@10 {:.6}\tRecall@10 {:.6}",
        pop.ndcg10, pop.recall10
    );
    Ok(())
}

fn human(x: f64) -> String {
    if x >= 1e6 {
        format!("{:.2}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        format!("{x:.0}")
    }
}

fn memory_table(r: &MemoryReport) -> String {
    let mut s = String::new();
    let mut row = |k: &str, v: String| s.push_str(&format!("{k}\t{v}\n"));
    row("ladder", r.ladder.to_string());
    row("layers", r.layers.to_string());
    row("gamma", r.gamma.to_string());
    row("batch", r.batch.to_string());
    row("seq_len", r.seq_len.to_string());
    row("params_nested", r.params_nested.to_string());
    row("params_independent", r.params_independent.to_string());
    row(
        "param_ratio",
        format!("{} ({:.6})", r.ratio, ratio_f64(r.ratio)),
    );
    row(
        "saving_rate",
        format!("{} ({:.4}%)", r.saving, 100.0 * ratio_f64(r.saving)),
    );
    let w = r.weights_saved() as f64;
    row("weights_saved", format!("{w:.0} ({})", human(w)));
    row(
        "activations_nested",
        format!("{:.2}", ratio_f64(r.acts_nested)),
    );
    row(
        "activations_independent",
        format!("{:.2}", ratio_f64(r.acts_independent)),
    );
    let act = ratio_f64(r.activations_saved());
    row("activations_saved", format!("{act:.2} ({})", human(act)));
    row(
        "saving_rate_all_params",
        format!("{:.4}%", 100.0 * ratio_f64(r.all_saving())),
    );
    s.push_str("size\tcumulative_saving_2d\tcumulative_saving_all\n");
    for ((m, a), b) in r
        .ladder
        .sizes()
        .iter()
        .zip(r.cumulative_savings())
        .zip(r.cumulative_savings_all())
    {
        s.push_str(&format!(
            "{m}\t{:.4}%\t{:.4}%\n",
            100.0 * ratio_f64(a),
            100.0 * ratio_f64(b)
        ));
    }
    s
}

fn cmd_memory(a: &MemoryArgs) -> Result<()> {
    let ladder = match (&a.ladder, a.d) {
        (Some(l), _) => l.clone(),
        (None, Some(d)) => SizeLadder::geometric(a.ladder_min, d)?,
        (None, None) => return Err(Error::Config("analyze-memory needs --ladder or -d".into())),
    };
    let r = memory_report(a.layers, a.gamma, a.batch, a.seq_len, &ladder)?;
    print!("{}", memory_table(&r));
    Ok(())
}
