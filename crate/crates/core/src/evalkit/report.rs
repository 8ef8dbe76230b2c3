use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{copy_score, greyout_score, psnr_video, ssim_video, sync_score};
use super::probe::{ProbeSetting, VarianceProbeResult};
use crate::error::{Error, Result};
use crate::spriteworld::Image;

/// One row per (experiment, clip).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub np: usize,
    pub seed: u64,
    pub clip: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub rho: f64,
    pub lag: i64,
    pub copy_score: f64,
    pub greyout: f64,
    pub degenerate_flag: bool,
}

/// Experiment coordinates shared by every row of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentKey {
    pub strategy: String,
    pub np: usize,
    pub seed: u64,
}

/// Scores generated frames against ground truth; `pose_priors[t]` is the frame
/// the model could have copied when producing `generated[t]`.
pub fn evaluate_clip(
    key: &ExperimentKey,
    clip: usize,
    generated: &[Image],
    truth: &[Image],
    pose_priors: &[Image],
    driving_signal: &[f64],
) -> Result<MetricRow> {
    let sync = sync_score(generated, driving_signal)?;
    Ok(MetricRow {
        strategy: key.strategy.clone(),
        np: key.np,
        seed: key.seed,
        clip,
        psnr: psnr_video(generated, truth)?,
        ssim: ssim_video(generated, truth)?,
        rho: sync.rho,
        lag: sync.lag,
        copy_score: copy_score(generated, pose_priors, driving_signal)?,
        greyout: greyout_score(generated),
        degenerate_flag: sync.degenerate,
    })
}

/// Variance-probe CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub strategy: String,
    pub seed: u64,
    pub setting: ProbeSetting,
    pub variance: f64,
    pub d: usize,
    pub items: usize,
}

impl ProbeRow {
    pub fn new(strategy: &str, seed: u64, r: &VarianceProbeResult) -> Self {
        Self { strategy: strategy.into(), seed, setting: r.setting, variance: r.variance, d: r.d, items: r.items }
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv stream>", e))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(input: impl Read) -> Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(f))
}

/// Mean of `f` over rows matching `strategy` and `seed`; `None` if there are none.
pub fn mean_by(rows: &[MetricRow], strategy: &str, seed: u64, f: impl Fn(&MetricRow) -> f64) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| r.strategy == strategy && r.seed == seed).map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
