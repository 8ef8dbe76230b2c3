//! The `talkdiff` command line: one subcommand per experiment stage, each
//! writing into its own `--out` directory together with a `run.json` record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diffcore::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_clip, write_csv_file, ExperimentKey, MetricRow, ProbeRow};
use crate::latentcodec::{train_codec_with, Codec, CodecTrainConfig};
use crate::numcore::Checkpoint;
use crate::pipeline::{
    encode_clips, eval_subset, load_model, pose_priors, probe_model, run_ablation, train_diffusion, RefStrategy,
    StrategyKind, Synthesizer, TrainConfig, METRICS_CSV, PROBES_CSV,
};
use crate::spriteworld::{
    encode_png, generate_dataset, read_clip_dir, read_dataset, write_dataset, write_generated_dataset, Clip, Image,
    MANIFEST_FILE,
};

pub const RUN_FILE: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";
pub const CODEC_CHECKPOINT: &str = "codec.ckpt";
pub const HISTORY_FILE: &str = "history.json";
/// Caps worker threads when `--deterministic` is not given.
pub const THREADS_ENV: &str = "TALKDIFF_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "talkdiff", version, about = "Audio-driven talking-sprite synthesis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory; refused when non-empty unless --overwrite is given.
    #[arg(long)]
    out: PathBuf,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
    /// Single-threaded numerics; reruns produce identical bytes.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON training config; any config field can also be set with `--field value`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural sprite dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        clips: usize,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the image autoencoder on dataset frames.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset; defaults to the last sixteenth of --data.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long, default_value_t = CodecTrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = CodecTrainConfig::default().batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = CodecTrainConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use every n-th frame of each clip.
        #[arg(long, default_value_t = 4)]
        frame_stride: usize,
        /// Use at most this many training clips.
        #[arg(long)]
        max_clips: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one denoiser (config fields `data` and `codec` are required).
    TrainDiff {
        /// Training seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Generate frames autoregressively for a clip or a whole dataset.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Codec checkpoint; defaults to the one recorded in the denoiser's config.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// A `clipNNNN` directory or a dataset directory.
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        ddim_steps: Option<usize>,
        /// Truncate conditioning clips to this many frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a PNG strip per clip: originals on top, generated below.
        #[arg(long)]
        contact_sheet: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score generated clips against their originals.
    Eval {
        /// Dataset written by `synth`.
        #[arg(long)]
        generated: PathBuf,
        /// Original clip or dataset, matched to the generated clips by order.
        #[arg(long)]
        truth: PathBuf,
        /// Strategy label for the CSV; defaults to `unknown`.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value_t = 1)]
        np: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every strategy cell under every configured seed.
    Ablate {
        /// Comma-separated strategies: rnd, prv, prvbn, rnd+prvbn.
        #[arg(long, default_value = "rnd,prv,prvbn,rnd+prvbn")]
        strategies: String,
        /// Comma-separated previous-frame counts for the bottlenecked strategies.
        #[arg(long, default_value = "1")]
        nps: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Latent variance across inputs sharing identity or pose.
    VarianceProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Dataset providing the probe clips.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenData { common, .. }
            | Self::TrainCodec { common, .. }
            | Self::TrainDiff { common, .. }
            | Self::Synth { common, .. }
            | Self::Eval { common, .. }
            | Self::Ablate { common, .. }
            | Self::VarianceProbe { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::TrainCodec { .. } => "train-codec",
            Self::TrainDiff { .. } => "train-diff",
            Self::Synth { .. } => "synth",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
            Self::VarianceProbe { .. } => "variance-probe",
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Subcommands that take `--field value` config overrides.
const CONFIG_COMMANDS: [&str; 2] = ["train-diff", "ablate"];

/// Splits `--field value` pairs naming config fields off the argument list.
/// Flags the subcommand declares itself are left for the parser.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let Some(pos) = argv.iter().position(|a| CONFIG_COMMANDS.contains(&a.as_str())) else {
        return (argv, Vec::new());
    };
    let own: Vec<String> = Cli::command()
        .find_subcommand(&argv[pos])
        .map(|c| c.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect())
        .unwrap_or_default();
    let fields: Vec<String> = match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let (mut rest, mut overrides) = (argv[..=pos].to_vec(), Vec::new());
    let mut it = argv.into_iter().skip(pos + 1).peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let top = name.split('.').next().unwrap_or("").replace('-', "_");
        if own.contains(&name) || !fields.contains(&top) {
            rest.push(arg);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(v) => overrides.push((name, v)),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let (argv, overrides) = split_overrides(argv);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = if cli.command.common().deterministic {
        1
    } else {
        std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(0)
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| execute(&cli.command, &argv, &overrides)) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            EXIT_FAILURE
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exclusive writer handle on an output directory; the lock file is removed on drop.
struct OutDir {
    path: PathBuf,
}

impl OutDir {
    fn acquire(path: &Path, overwrite: bool) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(path.to_path_buf())),
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let out = Self { path: path.to_path_buf() };
        let entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().is_some_and(|n| n != LOCK_FILE))
            .collect();
        if !entries.is_empty() {
            if !overwrite {
                return Err(Error::WouldClobber(path.to_path_buf()));
            }
            for p in entries {
                let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
                r.map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(out)
    }

    fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

/// Git-style object id of a file: SHA-256 over `blob <len>\0` and the bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(&bytes);
    Ok(format!("sha256:{:x}", h.finalize()))
}

/// Provenance record for one invocation.
struct RunRecord {
    config: Value,
    seeds: Vec<u64>,
    inputs: BTreeMap<String, String>,
}

impl RunRecord {
    fn new(config: Value, seeds: Vec<u64>) -> Self {
        Self { config, seeds, inputs: BTreeMap::new() }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), content_hash(path)?);
        Ok(())
    }

    /// Writes `run.json`; `--out` is omitted so reruns into other directories match.
    fn write(&self, out: &OutDir, command: &str, argv: &[String]) -> Result<()> {
        let mut args = Vec::new();
        let mut it = argv.iter().skip(1);
        while let Some(a) = it.next() {
            if a == "--out" {
                it.next();
            } else if !a.starts_with("--out=") {
                args.push(a.clone());
            }
        }
        let mut outputs = BTreeMap::new();
        collect_checkpoints(&out.path, &out.path, &mut outputs)?;
        let doc = json!({
            "command": command,
            "args": args,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "checkpoints": outputs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = out.join(RUN_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(&path, e))
    }
}

fn collect_checkpoints(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_checkpoints(root, &p, out)?;
        } else if p.extension().is_some_and(|e| e == "ckpt") {
            let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
            out.insert(rel, content_hash(&p)?);
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> std::result::Result<TrainConfig, Failure> {
    let base = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Run(e),
            other => Failure::Usage(one_line(&other.to_string())),
        })?,
        None => TrainConfig::default(),
    };
    base.with_overrides(overrides).map_err(|e| Failure::Usage(one_line(&e.to_string())))
}

fn load_codec(path: &Path) -> Result<Codec> {
    Codec::from_checkpoint(&Checkpoint::load(path)?)
}

/// A dataset directory or a single `clipNNNN` directory.
fn read_clips(path: &Path) -> Result<Vec<Clip>> {
    if path.join(MANIFEST_FILE).exists() {
        Ok(read_dataset(path)?.1)
    } else {
        Ok(vec![read_clip_dir(path)?])
    }
}

fn required(field: &str, value: &Option<PathBuf>) -> std::result::Result<PathBuf, Failure> {
    value
        .clone()
        .ok_or_else(|| Failure::Usage(format!("config field `{field}` is required (set it with --{field} PATH)")))
}

fn parse_list<T>(raw: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> std::result::Result<Vec<T>, Failure> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| f(s.trim()).ok_or_else(|| Failure::Usage(format!("invalid {what} {s:?}"))))
        .collect()
}

/// Strategy cells of an ablation: bottlenecked kinds cross every `np`, the rest use 1.
pub fn ablation_cells(kinds: &[StrategyKind], nps: &[usize]) -> Result<Vec<RefStrategy>> {
    let mut cells = Vec::new();
    for &k in kinds {
        let ks: &[usize] = if k.bottleneck() { nps } else { &[1] };
        for &np in ks {
            let s = RefStrategy::new(k, np)?;
            if !cells.contains(&s) {
                cells.push(s);
            }
        }
    }
    Ok(cells)
}

/// Holds out the last sixteenth of the clips (at least one).
fn split_holdout(mut clips: Vec<Clip>) -> (Vec<Clip>, Vec<Clip>) {
    let n_val = (clips.len() / 16).max(1).min(clips.len().saturating_sub(1));
    let val = clips.split_off(clips.len() - n_val);
    (clips, val)
}

fn contact_sheet(truth: &[Image], generated: &[Image]) -> Result<Image> {
    let (h, w) = (truth[0].height(), truth[0].width());
    let mut sheet = Image::filled(2 * h, w * truth.len(), [0.0; 3]);
    for (row, frames) in [truth, generated].into_iter().enumerate() {
        for (i, f) in frames.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    sheet.set_pixel(row * h + y, i * w + x, f.pixel(y, x));
                }
            }
        }
    }
    Ok(sheet)
}

fn execute(cmd: &Command, argv: &[String], overrides: &[(String, String)]) -> std::result::Result<(), Failure> {
    let common = cmd.common();
    let name = cmd.name();
    match cmd {
        Command::GenData { seed, clips, frames, .. } => {
            if *clips == 0 || *frames == 0 {
                return Err(Failure::Usage("--clips and --frames must be positive".into()));
            }
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let data = generate_dataset(*seed, *clips, *frames)?;
            write_dataset(&data, &out.path, Some(*seed))?;
            RunRecord::new(json!({ "clips": clips, "frames": frames }), vec![*seed]).write(&out, name, argv)?;
        }
        Command::TrainCodec { data, val_data, epochs, batch_size, lr, seed, frame_stride, max_clips, .. } => {
            if *frame_stride == 0 {
                return Err(Failure::Usage("--frame-stride must be positive".into()));
            }
            let cfg = CodecTrainConfig { epochs: *epochs, batch_size: *batch_size, lr: *lr, seed: *seed };
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let mut clips = read_dataset(data)?.1;
            let val_clips = match val_data {
                Some(v) => read_dataset(v)?.1,
                None => {
                    let (train, val) = split_holdout(clips);
                    clips = train;
                    val
                }
            };
            if let Some(m) = max_clips {
                clips.truncate(*m);
            }
            let frames = |cs: &[Clip]| -> Vec<Image> {
                cs.iter().flat_map(|c| c.frames.iter().step_by(*frame_stride).cloned()).collect()
            };
            let (train, val) = (frames(&clips), frames(&val_clips));
            let (codec, history) = train_codec_with(&train, &val, &cfg, |e, loss, psnr| {
                eprintln!("epoch {e}: loss {loss:.5} held-out psnr {psnr:.2} dB");
            })?;
            codec.to_checkpoint().save(&out.join(CODEC_CHECKPOINT))?;
            let rec = codec.decode_batch(&codec.encode_batch(&val)?)?;
            let ssim =
                val.iter().zip(&rec).map(|(a, b)| crate::evalkit::ssim(a, b)).sum::<Result<f64>>()? / val.len() as f64;
            let summary =
                json!({ "history": history, "heldout_psnr": codec.round_trip_psnr(&val)?, "heldout_ssim": ssim });
            write_json(&out.join(HISTORY_FILE), &summary)?;
            let mut record = RunRecord::new(serde_json::to_value(&cfg).map_err(Error::from)?, vec![*seed]);
            record.input(&data.join(MANIFEST_FILE))?;
            record.write(&out, name, argv)?;
        }
        Command::TrainDiff { seed, config, .. } => {
            let cfg = load_config(config, overrides)?;
            let (data_dir, codec_path) = (required("data", &cfg.data)?, required("codec", &cfg.codec)?);
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let codec = load_codec(&codec_path)?;
            let latents = encode_clips(&codec, &read_dataset(&data_dir)?.1)?;
            let (_, history) = train_diffusion(&cfg, seed, &latents, Some(&out.path), |r| {
                eprintln!("epoch {}: train {:.5} val {:.5} ({} steps)", r.epoch, r.train_loss, r.val_loss, r.steps);
            })?;
            write_json(&out.join(HISTORY_FILE), &history)?;
            let mut record = RunRecord::new(serde_json::to_value(&cfg).map_err(Error::from)?, vec![seed]);
            record.input(&codec_path)?;
            record.input(&data_dir.join(MANIFEST_FILE))?;
            record.write(&out, name, argv)?;
        }
        Command::Synth { ckpt, codec, clip, ddim_steps, frames, seed, contact_sheet: sheet, .. } => {
            let ck = Checkpoint::load(ckpt)?;
            let (model, strategy) = load_model(&ck)?;
            let cfg: TrainConfig = ck.meta("train_config")?;
            let codec_path = codec.clone().or(cfg.codec.clone()).ok_or_else(|| {
                Failure::Usage("no codec given and none recorded in the checkpoint; pass --codec".into())
            })?;
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let codec_model = load_codec(&codec_path)?;
            let schedule = DiffusionSchedule::from_config(&cfg.schedule)?;
            let steps = ddim_steps.unwrap_or(cfg.eval_ddim_steps);
            let mut clips = read_clips(clip)?;
            if let Some(n) = frames {
                clips = clips.iter().map(|c| c.truncated((*n).min(c.len()))).collect();
            }
            let synth =
                Synthesizer { model: &model, codec: &codec_model, schedule: &schedule, strategy, ddim_steps: steps };
            let generated = synth.synthesize_clips(&clips, *seed)?;
            let outputs: Vec<Clip> =
                clips.iter().zip(&generated).map(|(c, g)| Clip { frames: g.clone(), ..c.clone() }).collect();
            write_generated_dataset(&outputs, &out.path)?;
            if *sheet {
                for (i, (c, g)) in clips.iter().zip(&generated).enumerate() {
                    let path = out.join(&format!("contact_sheet_clip{i:04}.png"));
                    let bytes = encode_png(&contact_sheet(&c.frames, g)?)?;
                    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                }
            }
            let mut record =
                RunRecord::new(json!({ "strategy": strategy, "ddim_steps": steps, "train_config": cfg }), vec![*seed]);
            record.input(ckpt)?;
            record.input(&codec_path)?;
            record.write(&out, name, argv)?;
        }
        Command::Eval { generated, truth, label, np, seed, .. } => {
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let gen = read_dataset(generated)?.1;
            let truth_clips = read_clips(truth)?;
            if gen.len() != truth_clips.len() {
                return Err(Failure::Usage(format!(
                    "{} generated clips but {} originals",
                    gen.len(),
                    truth_clips.len()
                )));
            }
            let key =
                ExperimentKey { strategy: label.clone().unwrap_or_else(|| "unknown".into()), np: *np, seed: *seed };
            let rows: Vec<MetricRow> = gen
                .iter()
                .zip(&truth_clips)
                .enumerate()
                .map(|(i, (g, t))| {
                    let n = g.len().min(t.len());
                    let gf = &g.frames[..n];
                    evaluate_clip(
                        &key,
                        i,
                        gf,
                        &t.frames[..n],
                        &pose_priors(gf),
                        &t.driving_signal[..n * crate::spriteworld::SAMPLES_PER_FRAME],
                    )
                })
                .collect::<Result<_>>()?;
            write_csv_file(&rows, &out.join(METRICS_CSV))?;
            RunRecord::new(json!({ "label": key.strategy, "np": np }), vec![*seed]).write(&out, name, argv)?;
        }
        Command::Ablate { strategies, nps, config, .. } => {
            let cfg = load_config(config, overrides)?;
            let kinds = parse_list(strategies, "strategy", |s| s.parse::<StrategyKind>().ok())?;
            let nps = parse_list(nps, "np", |s| s.parse::<usize>().ok().filter(|&n| n > 0))?;
            let cells = ablation_cells(&kinds, &nps).map_err(|e| Failure::Usage(one_line(&e.to_string())))?;
            let (data_dir, codec_path) = (required("data", &cfg.data)?, required("codec", &cfg.codec)?);
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let codec = load_codec(&codec_path)?;
            let clips = read_dataset(&data_dir)?.1;
            let (train, eval) = match &cfg.eval_data {
                Some(p) => (clips, read_dataset(p)?.1),
                None => split_holdout(clips),
            };
            run_ablation(&cfg, &cells, &train, &eval, &codec, Some(&out.path), |c| {
                eprintln!(
                    "cell {} np={} seed={}: best epoch {}",
                    c.strategy, c.strategy.np, c.seed, c.history.best_epoch
                );
            })?;
            let mut record = RunRecord::new(serde_json::to_value(&cfg).map_err(Error::from)?, cfg.seeds.clone());
            record.input(&codec_path)?;
            record.write(&out, name, argv)?;
        }
        Command::VarianceProbe { ckpt, codec, data, seed, .. } => {
            let ck = Checkpoint::load(ckpt)?;
            let (model, strategy) = load_model(&ck)?;
            let cfg: TrainConfig = ck.meta("train_config")?;
            let codec_path = codec.clone().or(cfg.codec.clone()).ok_or_else(|| {
                Failure::Usage("no codec given and none recorded in the checkpoint; pass --codec".into())
            })?;
            let out = OutDir::acquire(&common.out, common.overwrite)?;
            let codec_model = load_codec(&codec_path)?;
            let schedule = DiffusionSchedule::from_config(&cfg.schedule)?;
            let clips = eval_subset(&read_dataset(data)?.1, &cfg);
            let rows: Vec<ProbeRow> = probe_model(&model, &codec_model, &schedule, &strategy, &clips, *seed)?
                .iter()
                .map(|r| ProbeRow::new(&strategy.kind.to_string(), *seed, r))
                .collect();
            write_csv_file(&rows, &out.join(PROBES_CSV))?;
            let mut record = RunRecord::new(json!({ "strategy": strategy }), vec![*seed]);
            record.input(ckpt)?;
            record.input(&codec_path)?;
            record.write(&out, name, argv)?;
        }
    }
    Ok(())
}
