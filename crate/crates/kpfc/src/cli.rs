//! The `kpfc` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kpfc_core::bench::{measure_latency, report_table, DEFAULT_ITERS, DEFAULT_WARMUP};
use kpfc_core::dataset::{split, split_by_clip, windows_for_clips, MotionClip, Window};
use kpfc_core::envelope::{keepout_boxes, min_clearance};
use kpfc_core::metrics::{baseline_predict, motion_fid, rmse_x100, Baseline};
use kpfc_core::models::{build_model, ArchKind, Model};
use kpfc_core::synthgen::{
    generate_corpus, generate_real_like, CorpusTier, LabeledClip, MIN_CLIP_LEN,
};
use kpfc_core::training::{
    predict, train_with, AdamState, Clock, EpochHook, EpochRecord, TrainConfig, TrainHistory,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::clips::{load_clips, records, write_clips, write_labels, CLIPS_FILE, LABELS_FILE};
use crate::error::{KpfcError, Result, EXIT_OK, EXIT_USAGE};
use crate::infer::{check_standard_shape, forecast_world, normalize_all, Streamer};
use crate::report::{
    BenchOutput, ClearanceRecord, EnvelopeFrame, EnvelopeUnion, HistoryOutput, MetricsOutput,
};
use crate::Monotonic;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "kpfc", version, about = "Keypoint motion forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clip corpus as JSONL plus a label sidecar.
    Synth(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Pretrain on a synthetic corpus, then finetune on target clips.
    PretrainFinetune(PretrainArgs),
    /// RMSE x100, FID and the copy-last baseline for a checkpoint.
    Eval(EvalArgs),
    /// Batch-1 inference latency.
    Bench(BenchArgs),
    /// Stream 30-frame forecasts for every full 60-frame observation.
    Forecast(ForecastArgs),
    /// Keep-out boxes around the forecast following the end of each clip.
    Envelope(EnvelopeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus size: 9k, 45k or 90k clips.
    #[arg(long, default_value = "9k")]
    pub tier: CorpusTier,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, or `-` for clips on stdout.
    #[arg(long)]
    pub out: String,
    /// Generate the faster, noisier target distribution instead of a tier.
    #[arg(long)]
    pub real_like: bool,
    /// Clip count for --real-like.
    #[arg(long, default_value_t = 437, requires = "real_like")]
    pub clips: usize,
    /// Frames per clip for --real-like.
    #[arg(long, default_value_t = 150, requires = "real_like")]
    pub length: usize,
}

#[derive(Debug, Args, Clone)]
pub struct SplitArgs {
    /// Hold out whole clips instead of individual windows.
    #[arg(long)]
    pub split_by_clip: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON file with any TrainConfig fields; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rewrite the checkpoint every N epochs (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: ArchKind,
    /// Data directory or clip file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.history.json`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub arch: ArchKind,
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Epochs on the synthetic corpus; --epochs applies to finetuning.
    #[arg(long, default_value_t = 200)]
    pub pretrain_epochs: usize,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path, or `-` for stdout.
    #[arg(long, default_value = "-")]
    pub json: String,
    /// Evaluate every window instead of the held-out split.
    #[arg(long)]
    pub all: bool,
    /// Split seed; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Architecture name, or `all`.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    pub arch: Option<String>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the reports as JSON (`-` for stdout, table then goes to stderr).
    #[arg(long)]
    pub json: Option<String>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Clip file, or `-` for stdin.
    #[arg(long = "in")]
    pub input: String,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct EnvelopeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Inflation of every box, in source coordinate units.
    #[arg(long, allow_negative_numbers = true)]
    pub margin: f64,
    /// Also report the clearance of this point, given as `x,y`.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub point: Option<[f64; 2]>,
    #[arg(long, default_value = "-")]
    pub out: String,
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok([parse(x)?, parse(y)?])
}

/// Parse `args` (program name first), run, print errors, return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!(
                "error[usage]: {}",
                text.strip_prefix("error: ").unwrap_or(&text)
            );
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::PretrainFinetune(a) => pretrain_finetune(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Forecast(a) => forecast(a),
        Command::Envelope(a) => envelope(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| KpfcError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| KpfcError::io(path, e))
}

fn output(target: &str) -> Result<Box<dyn Write>> {
    if target == "-" {
        Ok(Box::new(io::stdout().lock()))
    } else {
        Ok(Box::new(create(Path::new(target))?))
    }
}

fn write_json<T: serde::Serialize>(target: &str, value: &T) -> Result<()> {
    let mut out = output(target)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| KpfcError::io(target, e.into()))?;
    writeln!(out)
        .and_then(|_| out.flush())
        .map_err(|e| KpfcError::io(target, e))
}

fn write_line<T: serde::Serialize>(out: &mut dyn Write, target: &str, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| KpfcError::io(target, e.into()))?;
    out.write_all(b"\n").map_err(|e| KpfcError::io(target, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let clips: Vec<LabeledClip> = if a.real_like {
        if a.length < MIN_CLIP_LEN {
            return Err(KpfcError::Usage(format!(
                "--length must be at least {MIN_CLIP_LEN}"
            )));
        }
        generate_real_like(a.clips, a.length, a.seed)?
    } else {
        generate_corpus(a.tier, a.seed)?
    };
    let frames: usize = clips.iter().map(|c| c.clip.frames.len()).sum();
    if a.out == "-" {
        write_clips(io::stdout().lock(), clips.iter().map(|c| &c.clip))
            .map_err(|e| KpfcError::io("<stdout>", e))?;
    } else {
        let dir = Path::new(&a.out);
        let path = dir.join(CLIPS_FILE);
        write_clips(create(&path)?, clips.iter().map(|c| &c.clip))
            .map_err(|e| KpfcError::io(&path, e))?;
        let path = dir.join(LABELS_FILE);
        write_labels(create(&path)?, &clips).map_err(|e| KpfcError::io(&path, e))?;
    }
    eprintln!("synth: {} clips, {frames} frames", clips.len());
    Ok(())
}

/// Per-arch defaults, then the config file, then flags.
pub fn train_config(kind: ArchKind, args: &ConfigArgs) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::for_arch(kind)).expect("config serializes");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| KpfcError::io(path, e))?;
        let file: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| KpfcError::Usage(format!("{}: {e}", path.display())))?;
        let serde_json::Value::Object(fields) = file else {
            return Err(KpfcError::Usage(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        };
        for (k, v) in fields {
            value[k] = v;
        }
    }
    let mut cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| KpfcError::Usage(format!("config: {e}")))?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()
        .map_err(|e| KpfcError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn windows(path: &Path) -> Result<(Vec<MotionClip>, Vec<Window>)> {
    let clips = load_clips(path)?;
    let windows = windows_for_clips(&clips, 1)?;
    if windows.is_empty() {
        return Err(kpfc_core::Error::Parameter(format!(
            "{} has no clip long enough for one window",
            path.display()
        ))
        .into());
    }
    Ok((clips, windows))
}

fn split_windows(all: Vec<Window>, s: &SplitArgs, seed: u64) -> Result<(Vec<Window>, Vec<Window>)> {
    if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
        return Err(KpfcError::Usage(
            "--train-fraction must be in (0, 1)".into(),
        ));
    }
    Ok(if s.split_by_clip {
        split_by_clip(all, s.train_fraction, seed)?
    } else {
        split(all, s.train_fraction, seed)?
    })
}

/// Logs epochs to stderr and rewrites the checkpoint when asked.
struct Progress<'a> {
    label: &'a str,
    out: &'a Path,
    cfg: &'a TrainConfig,
}

impl EpochHook for Progress<'_> {
    fn epoch_end(
        &mut self,
        model: &Model<f32>,
        state: &AdamState<f32>,
        r: &EpochRecord,
        checkpoint: bool,
    ) -> kpfc_core::Result<()> {
        let eval = r
            .eval_rmse_x100
            .map_or(String::new(), |v| format!(" eval_rmse_x100 {v:.3}"));
        eprintln!(
            "{} epoch {}/{} loss {:.6}{eval} ({:.1}s)",
            self.label, r.epoch, self.cfg.epochs, r.train_loss, r.seconds
        );
        if checkpoint {
            save_checkpoint(self.out, model, Some(state), Some(self.cfg))
                .map_err(|e| kpfc_core::Error::Contract(format!("checkpoint write failed: {e}")))?;
        }
        Ok(())
    }
}

fn history_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".history.json");
        PathBuf::from(p)
    })
}

fn fit(
    model: &mut Model<f32>,
    train: &[Window],
    eval: &[Window],
    cfg: &TrainConfig,
    label: &str,
    out: &Path,
    clock: &dyn Clock,
) -> Result<(TrainHistory, AdamState<f32>)> {
    let mut state = AdamState::for_model(model);
    let mut hook = Progress { label, out, cfg };
    let history = train_with(model, train, eval, cfg, &mut state, clock, &mut hook)?;
    Ok((history, state))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(a.arch, &a.config)?;
    let (_, all) = windows(&a.data)?;
    let (train_w, test_w) = split_windows(all, &a.split, cfg.seed)?;
    eprintln!(
        "train: {} train / {} held-out windows",
        train_w.len(),
        test_w.len()
    );
    let mut model = build_model(a.arch, cfg.seed)?;
    let clock = Monotonic::new();
    let (history, state) = fit(&mut model, &train_w, &test_w, &cfg, "train", &a.out, &clock)?;
    save_checkpoint(&a.out, &model, Some(&state), Some(&cfg))?;
    let out = HistoryOutput {
        arch: a.arch,
        pretrain: None,
        train: history,
    };
    write_json(&history_path(&a.out, &a.history).to_string_lossy(), &out)
}

fn pretrain_finetune(a: PretrainArgs) -> Result<()> {
    let cfg_fine = train_config(a.arch, &a.config)?;
    let cfg_pre = TrainConfig {
        epochs: a.pretrain_epochs,
        ..cfg_fine.clone()
    };
    let (_, synthetic) = windows(&a.synth)?;
    let (_, real) = windows(&a.real)?;
    let (real_train, real_eval) = split_windows(real, &a.split, cfg_fine.seed)?;
    eprintln!(
        "pretrain-finetune: {} synthetic, {} target train / {} held-out windows",
        synthetic.len(),
        real_train.len(),
        real_eval.len()
    );
    let mut model = build_model(a.arch, cfg_pre.seed)?;
    let clock = Monotonic::new();
    let (pre, _) = fit(
        &mut model,
        &synthetic,
        &[],
        &cfg_pre,
        "pretrain",
        &a.out,
        &clock,
    )?;
    let (fine, state) = fit(
        &mut model,
        &real_train,
        &real_eval,
        &cfg_fine,
        "finetune",
        &a.out,
        &clock,
    )?;
    save_checkpoint(&a.out, &model, Some(&state), Some(&cfg_fine))?;
    let out = HistoryOutput {
        arch: a.arch,
        pretrain: Some(pre),
        train: fine,
    };
    write_json(&history_path(&a.out, &a.history).to_string_lossy(), &out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut model = ckpt.model;
    check_standard_shape(model.hyper())?;
    let (_, all) = windows(&a.data)?;
    let (windows, split_name) = if a.all {
        (all, "all")
    } else {
        let seed = a.seed.or(ckpt.train_config.map(|c| c.seed)).unwrap_or(0);
        (split_windows(all, &a.split, seed)?.1, "test")
    };
    let targets = {
        let refs: Vec<&Window> = windows.iter().collect();
        kpfc_core::dataset::batch_tensors::<f32>(&refs)?.1
    };
    let preds = predict(&mut model, &windows, EVAL_BATCH)?;
    let copy_last = baseline_predict(&windows, Baseline::CopyLast)?;
    let report = MetricsOutput {
        arch: model.kind(),
        split: split_name.into(),
        rmse_x100: rmse_x100(&preds, &targets)?,
        fid: motion_fid(&preds, &targets)?,
        n: windows.len(),
        copy_last_rmse_x100: rmse_x100(&copy_last, &targets)?,
    };
    eprintln!(
        "eval: {} windows, rmse_x100 {:.3} (copy-last {:.3}), fid {:.3}",
        report.n, report.rmse_x100, report.copy_last_rmse_x100, report.fid
    );
    write_json(&a.json, &report)
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut models: Vec<Model<f32>> = Vec::new();
    if let Some(path) = &a.ckpt {
        models.push(load_checkpoint(path)?.model);
    } else {
        let arch = a.arch.as_deref().unwrap_or("all");
        let kinds: Vec<ArchKind> = if arch == "all" {
            ArchKind::ALL.to_vec()
        } else {
            vec![arch
                .parse()
                .map_err(|e: kpfc_core::Error| KpfcError::Usage(e.to_string()))?]
        };
        for k in kinds {
            models.push(build_model(k, a.seed)?);
        }
    }
    if a.iters < 1 {
        return Err(KpfcError::Usage("--iters must be at least 1".into()));
    }
    let clock = Monotonic::new();
    let mut reports = Vec::new();
    for m in &mut models {
        reports.push(measure_latency(m, a.warmup, a.iters, a.seed, &clock)?);
    }
    let table = report_table(&reports);
    match a.json.as_deref() {
        Some("-") => eprint!("{table}"),
        _ => print!("{table}"),
    }
    if let Some(target) = &a.json {
        write_json(target, &BenchOutput { reports })?;
    }
    Ok(())
}

fn forecast(a: ForecastArgs) -> Result<()> {
    let mut model = load_checkpoint(&a.ckpt)?.model;
    let mut streamer = Streamer::new(&mut model)?;
    let (reader, path): (Box<dyn BufRead>, PathBuf) = if a.input == "-" {
        (Box::new(io::stdin().lock()), PathBuf::from("<stdin>"))
    } else {
        let p = PathBuf::from(&a.input);
        let f = File::open(&p).map_err(|e| KpfcError::io(&p, e))?;
        (Box::new(BufReader::new(f)), p)
    };
    let mut out = output(&a.out)?;
    let mut emitted = 0usize;
    for item in records(reader, &path) {
        let (line, rec) = item?;
        if let Some(f) = streamer.push(&rec, line)? {
            write_line(&mut *out, &a.out, &f)?;
            emitted += 1;
        }
    }
    out.flush().map_err(|e| KpfcError::io(&a.out, e))?;
    eprintln!("forecast: {emitted} forecasts");
    Ok(())
}

fn envelope(a: EnvelopeArgs) -> Result<()> {
    if a.margin < 0.0 || !a.margin.is_finite() {
        return Err(KpfcError::Usage(format!(
            "--margin must be finite and >= 0, got {}",
            a.margin
        )));
    }
    let mut model = load_checkpoint(&a.ckpt)?.model;
    check_standard_shape(model.hyper())?;
    let clips = load_clips(&a.input)?;
    let mut out = output(&a.out)?;
    let t_in = model.hyper().t_in;
    for clip in &clips {
        if clip.frames.len() < t_in {
            eprintln!(
                "envelope: skipping {} ({} frames < {t_in})",
                clip.clip_id,
                clip.frames.len()
            );
            continue;
        }
        let observed = normalize_all(&clip.frames[clip.frames.len() - t_in..])?;
        let world = forecast_world(&mut model, &observed)?;
        let env = keepout_boxes(&world, a.margin)?;
        for b in &env.boxes {
            write_line(&mut *out, &a.out, &EnvelopeFrame::new(&clip.clip_id, b))?;
        }
        if let Some(u) = env.union {
            let rec = EnvelopeUnion {
                clip_id: clip.clip_id.clone(),
                union: u.into(),
            };
            write_line(&mut *out, &a.out, &rec)?;
        }
        if let Some(p) = a.point {
            if let Some(c) = min_clearance(&world, p) {
                write_line(
                    &mut *out,
                    &a.out,
                    &ClearanceRecord::new(&clip.clip_id, p, &c),
                )?;
            }
        }
    }
    out.flush().map_err(|e| KpfcError::io(&a.out, e))
}
