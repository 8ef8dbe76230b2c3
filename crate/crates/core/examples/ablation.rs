//! A miniature strategy ablation: every reference strategy is trained briefly,
//! evaluated on held-out clips, and the merged metrics are printed as CSV.

use talkdiff::evalkit::write_csv;
use talkdiff::latentcodec::Codec;
use talkdiff::pipeline::{run_ablation, RefStrategy, StrategyKind, TrainConfig};
use talkdiff::spriteworld::generate_dataset;

fn main() -> talkdiff::Result<()> {
    let codec = Codec::new(0);
    let cfg = TrainConfig {
        epochs: 1,
        samples_per_epoch: 32,
        base_channels: 8,
        low_channels: 16,
        eval_clips: 2,
        eval_frames: 12,
        eval_ddim_steps: 5,
        ..TrainConfig::default()
    };
    let cells = StrategyKind::ALL.iter().map(|&k| RefStrategy::new(k, 1)).collect::<talkdiff::Result<Vec<_>>>()?;
    let report =
        run_ablation(&cfg, &cells, &generate_dataset(1, 6, 16)?, &generate_dataset(2, 2, 16)?, &codec, None, |c| {
            eprintln!("trained {} (seed {})", c.strategy, c.seed)
        })?;
    write_csv(&report.metrics, std::io::stdout())?;
    write_csv(&report.probes, std::io::stdout())?;
    Ok(())
}
