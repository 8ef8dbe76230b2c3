use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::strategy::{RefStrategy, StrategyKind};
use super::synth::{pose_priors, Synthesizer};
use super::train::{encode_clips, train_diffusion, EpochReport, LatentClip, TrainHistory};
use crate::diffcore::{DenoiserModel, DiffusionSchedule};
use crate::error::Result;
use crate::evalkit::{
    evaluate_clip, ident_items, pose_items, variance_probe, write_csv_file, ExperimentKey, MetricRow, ProbeItem,
    ProbeRow, ProbeSetting, ProbeSpec, VarianceProbeResult, MIN_IDENT_ITEMS, MIN_POSE_ITEMS, PROBE_STEP,
};
use crate::latentcodec::Codec;
use crate::spriteworld::Clip;

pub const METRICS_CSV: &str = "metrics.csv";
pub const PROBES_CSV: &str = "probes.csv";
/// Base clips averaged per probe setting.
pub const PROBE_CLIPS: usize = 8;
/// Target frame probed in each base clip (raised to `np` when needed).
pub const PROBE_TARGET: usize = 10;

/// Clips cut to the evaluation length.
pub fn eval_subset(clips: &[Clip], cfg: &TrainConfig) -> Vec<Clip> {
    clips.iter().take(cfg.eval_clips).map(|c| c.truncated(cfg.eval_frames.min(c.len()))).collect()
}

/// Synthesizes every clip and scores it against ground truth.
pub fn evaluate_model(synth: &Synthesizer, key: &ExperimentKey, clips: &[Clip], seed: u64) -> Result<Vec<MetricRow>> {
    let generated = synth.synthesize_clips(clips, seed)?;
    clips
        .iter()
        .zip(&generated)
        .enumerate()
        .map(|(i, (clip, gen))| evaluate_clip(key, i, gen, &clip.frames, &pose_priors(gen), &clip.driving_signal))
        .collect()
}

/// Recasts generic probe items into the reference slots a strategy consumes:
/// single-reference kinds repeat their one frame, `PrvBN` has no identity.
pub fn adapt_probe_items(items: Vec<ProbeItem>, strategy: &RefStrategy) -> Vec<ProbeItem> {
    items
        .into_iter()
        .map(|mut item| {
            match strategy.kind {
                StrategyKind::Rnd => item.poses = item.identity.iter().cloned().collect(),
                StrategyKind::Prv => item.identity = item.poses.first().cloned(),
                StrategyKind::PrvBN => item.identity = None,
                StrategyKind::RndPlusPrvBN => {}
            }
            item
        })
        .collect()
}

/// Both probe settings, each averaged over up to [`PROBE_CLIPS`] base clips.
pub fn probe_model(
    model: &DenoiserModel,
    codec: &Codec,
    schedule: &DiffusionSchedule,
    strategy: &RefStrategy,
    clips: &[Clip],
    seed: u64,
) -> Result<Vec<VarianceProbeResult>> {
    let t = PROBE_TARGET.max(strategy.np);
    let bases: Vec<&Clip> = clips.iter().filter(|c| c.len() > t).take(PROBE_CLIPS).collect();
    let mut out = Vec::new();
    for setting in [ProbeSetting::Ident, ProbeSetting::Pose] {
        let mut total = 0.0;
        let mut items = 0;
        for (k, clip) in bases.iter().enumerate() {
            let raw = match setting {
                ProbeSetting::Ident => {
                    let frames: Vec<usize> = (0..clip.len()).filter(|&i| i != t).take(MIN_IDENT_ITEMS).collect();
                    ident_items(clip, t, strategy.np, &frames)?
                }
                ProbeSetting::Pose => pose_items(clip, t, strategy.np, 0, MIN_POSE_ITEMS, seed ^ k as u64)?,
            };
            let spec = ProbeSpec {
                setting,
                items: adapt_probe_items(raw, strategy),
                d: PROBE_STEP,
                noise_seed: seed.wrapping_add(k as u64),
            };
            let r = variance_probe(model, codec, schedule, &spec)?;
            total += r.variance;
            items = r.items;
        }
        out.push(VarianceProbeResult { setting, variance: total / bases.len().max(1) as f64, d: PROBE_STEP, items });
    }
    Ok(out)
}

/// One trained and evaluated ablation cell.
pub struct CellResult {
    pub strategy: RefStrategy,
    pub seed: u64,
    pub model: DenoiserModel,
    pub history: TrainHistory,
    pub metrics: Vec<MetricRow>,
    pub probes: Vec<ProbeRow>,
}

/// Shared inputs of every cell.
pub struct AblationData<'a> {
    pub codec: &'a Codec,
    pub train: &'a [LatentClip],
    /// Held-out clips already cut by [`eval_subset`].
    pub eval: &'a [Clip],
}

pub fn run_cell(
    cfg: &TrainConfig,
    strategy: RefStrategy,
    seed: u64,
    data: &AblationData,
    out: Option<&Path>,
    on_epoch: impl FnMut(EpochReport),
) -> Result<CellResult> {
    let cell_cfg = TrainConfig { strategy: strategy.kind, np: strategy.np, seeds: vec![seed], ..cfg.clone() };
    let (model, history) = train_diffusion(&cell_cfg, seed, data.train, out, on_epoch)?;
    let schedule = DiffusionSchedule::from_config(&cfg.schedule)?;
    let synth = Synthesizer {
        model: &model,
        codec: data.codec,
        schedule: &schedule,
        strategy,
        ddim_steps: cfg.eval_ddim_steps,
    };
    let key = ExperimentKey { strategy: strategy.kind.to_string(), np: strategy.np, seed };
    let metrics = evaluate_model(&synth, &key, data.eval, seed)?;
    let probes = probe_model(&model, data.codec, &schedule, &strategy, data.eval, seed)?
        .iter()
        .map(|r| ProbeRow::new(&key.strategy, seed, r))
        .collect();
    Ok(CellResult { strategy, seed, model, history, metrics, probes })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub metrics: Vec<MetricRow>,
    pub probes: Vec<ProbeRow>,
}

impl AblationReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv_file(&self.metrics, &dir.join(METRICS_CSV))?;
        write_csv_file(&self.probes, &dir.join(PROBES_CSV))
    }
}

/// Directory of one cell under an ablation root.
pub fn cell_dir(root: &Path, strategy: &RefStrategy, seed: u64) -> PathBuf {
    root.join(format!("{}_np{}_seed{seed}", strategy.kind.cli_name().replace('+', "-"), strategy.np))
}

/// Trains and evaluates every strategy cell under every configured seed, in
/// order, writing each model under `out/<cell>/` and the merged CSVs to `out`.
pub fn run_ablation(
    cfg: &TrainConfig,
    cells: &[RefStrategy],
    train: &[Clip],
    eval: &[Clip],
    codec: &Codec,
    out: Option<&Path>,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<AblationReport> {
    cfg.validate()?;
    let latents = encode_clips(codec, train)?;
    let eval = eval_subset(eval, cfg);
    let data = AblationData { codec, train: &latents, eval: &eval };
    let mut report = AblationReport::default();
    for &strategy in cells {
        for &seed in &cfg.seeds {
            let dir = out.map(|o| cell_dir(o, &strategy, seed));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(|e| crate::Error::io(d, e))?;
            }
            let cell = run_cell(cfg, strategy, seed, &data, dir.as_deref(), |_| {})?;
            on_cell(&cell);
            report.metrics.extend(cell.metrics);
            report.probes.extend(cell.probes);
        }
    }
    if let Some(o) = out {
        report.write(o)?;
    }
    Ok(report)
}
