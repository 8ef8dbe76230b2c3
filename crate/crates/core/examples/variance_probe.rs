//! Mid-block activation variance when only the identity frame or only the head
//! pose changes, for an untrained single-reference and a bottlenecked model.

use talkdiff::diffcore::{DenoiserModel, DiffusionSchedule, ModelConfig, ScheduleConfig};
use talkdiff::latentcodec::Codec;
use talkdiff::pipeline::{probe_model, RefStrategy, StrategyKind};
use talkdiff::spriteworld::generate_dataset;

fn main() -> talkdiff::Result<()> {
    let codec = Codec::new(0);
    let schedule = DiffusionSchedule::from_config(&ScheduleConfig::default())?;
    let clips = generate_dataset(3, 2, 16)?;
    for kind in [StrategyKind::Rnd, StrategyKind::RndPlusPrvBN] {
        let s = RefStrategy::new(kind, 1)?;
        let model =
            DenoiserModel::new(ModelConfig { base_channels: 16, low_channels: 32, ..ModelConfig::new(s.layout()) }, 0)?;
        for r in probe_model(&model, &codec, &schedule, &s, &clips, 0)? {
            println!(
                "{kind:>12} {:>5}: variance {:.3e} over {} items at d={}",
                r.setting.to_string(),
                r.variance,
                r.items,
                r.d
            );
        }
    }
    Ok(())
}
