use proptest::prelude::*;

use super::*;
use crate::diffcore::{DenoiserModel, DiffusionSchedule, ModelConfig, ScheduleConfig};
use crate::latentcodec::Codec;
use crate::numcore::{normal_tensor, seeded_rng, Graph};
use crate::spriteworld::{generate_clip, generate_dataset, Clip};

fn strategy(kind: StrategyKind, np: usize) -> RefStrategy {
    RefStrategy::new(kind, np).unwrap()
}

fn tiny_config(kind: StrategyKind, np: usize) -> TrainConfig {
    TrainConfig {
        strategy: kind,
        np,
        base_channels: 8,
        low_channels: 16,
        batch_size: 4,
        epochs: 1,
        samples_per_epoch: 8,
        val_samples: 4,
        eval_clips: 1,
        eval_frames: crate::evalkit::MIN_SYNC_FRAMES,
        eval_ddim_steps: 2,
        ..TrainConfig::default()
    }
}

fn tiny_model(s: &RefStrategy, seed: u64) -> DenoiserModel {
    let cfg = ModelConfig { base_channels: 8, low_channels: 16, ..ModelConfig::new(s.layout()) };
    let mut model = DenoiserModel::new(cfg, seed).unwrap();
    // A nonzero head makes the output depend on every conditioning input.
    let p = model.params_mut();
    let id = p.lookup("diff.unet.conv_out.w").unwrap();
    let shape = p.get(id).shape().to_vec();
    *p.get_mut(id) = normal_tensor(&shape, &mut seeded_rng(seed, 77)).map(|v| 0.1 * v).with_grad();
    model
}

fn latent_clips(n: usize, frames: usize) -> (Codec, Vec<LatentClip>) {
    let codec = Codec::new(0);
    let clips = generate_dataset(4, n, frames).unwrap();
    let data = encode_clips(&codec, &clips).unwrap();
    (codec, data)
}

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap()
}

#[test]
fn prv_pose_is_previous_frame() {
    let idx = sample_reference_indices(&strategy(StrategyKind::Prv, 1), 50, 7, &mut seeded_rng(0, 0)).unwrap();
    assert_eq!(idx.poses, vec![6]);
    assert_eq!(idx.identity, Some(6));
}

#[test]
fn bottleneck_strategies_take_np_previous_frames() {
    let mut rng = seeded_rng(0, 1);
    let idx = sample_reference_indices(&strategy(StrategyKind::PrvBN, 5), 50, 9, &mut rng).unwrap();
    assert_eq!((idx.identity, idx.poses), (None, vec![4, 5, 6, 7, 8]));
    let idx = sample_reference_indices(&strategy(StrategyKind::RndPlusPrvBN, 2), 50, 9, &mut rng).unwrap();
    assert_eq!(idx.poses, vec![7, 8]);
    assert_ne!(idx.identity, Some(9));
}

#[test]
fn rnd_identity_is_uniform_over_other_frames() {
    let (len, t, draws) = (50usize, 17usize, 10_000usize);
    let s = strategy(StrategyKind::Rnd, 1);
    let mut rng = seeded_rng(11, 0);
    let mut counts = vec![0usize; len];
    for _ in 0..draws {
        let idx = sample_reference_indices(&s, len, t, &mut rng).unwrap();
        assert_eq!(idx.poses, vec![idx.identity.unwrap()]);
        counts[idx.identity.unwrap()] += 1;
    }
    assert_eq!(counts[t], 0);
    let p = 1.0 / (len - 1) as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate().filter(|&(i, _)| i != t) {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sigma,
            "frame {i} drawn {c} times, expected {mean:.1} ± {:.1}",
            3.0 * sigma
        );
    }
}

#[test]
fn targets_without_history_are_rejected() {
    let mut rng = seeded_rng(0, 0);
    assert!(sample_reference_indices(&strategy(StrategyKind::PrvBN, 5), 50, 4, &mut rng).is_err());
    assert!(sample_reference_indices(&strategy(StrategyKind::Prv, 1), 50, 0, &mut rng).is_err());
    assert!(sample_reference_indices(&strategy(StrategyKind::Rnd, 1), 50, 50, &mut rng).is_err());
}

#[test]
fn strategy_construction_rules() {
    assert!(RefStrategy::new(StrategyKind::Prv, 5).is_err());
    assert!(RefStrategy::new(StrategyKind::PrvBN, 0).is_err());
    assert_eq!(strategy(StrategyKind::PrvBN, 10).layout().prior_channels(), 16);
    for k in StrategyKind::ALL {
        assert_eq!(k.cli_name().parse::<StrategyKind>().unwrap(), k);
        assert_eq!(k.to_string().parse::<StrategyKind>().unwrap(), k);
    }
    assert!("bogus".parse::<StrategyKind>().is_err());
}

#[test]
fn sample_references_returns_clip_frames() {
    let clip = generate_clip(3, 12).unwrap();
    let (id, poses) =
        sample_references(&strategy(StrategyKind::RndPlusPrvBN, 2), &clip, 5, &mut seeded_rng(0, 0)).unwrap();
    assert!(clip.frames.contains(&id.unwrap()));
    assert_eq!(poses, vec![clip.frames[3].clone(), clip.frames[4].clone()]);
}

#[test]
fn inference_references_follow_protocol() {
    let s = strategy(StrategyKind::RndPlusPrvBN, 1);
    assert_eq!(inference_references(&s, 5).unwrap(), (RefSource::Seed, vec![RefSource::Generated(4)]));
    let s = strategy(StrategyKind::RndPlusPrvBN, 3);
    let (_, poses) = inference_references(&s, 1).unwrap();
    assert_eq!(poses, vec![RefSource::Generated(0); 3]);
    let (_, poses) = inference_references(&s, 7).unwrap();
    assert_eq!(poses, vec![RefSource::Generated(4), RefSource::Generated(5), RefSource::Generated(6)]);
    let s = strategy(StrategyKind::PrvBN, 1);
    assert_eq!(inference_references(&s, 3).unwrap().0, RefSource::Zero);
    for kind in [StrategyKind::Rnd, StrategyKind::Prv] {
        let s = strategy(kind, 1);
        assert_eq!(inference_references(&s, 3).unwrap(), (RefSource::Generated(2), vec![RefSource::Generated(2)]));
    }
    assert!(inference_references(&s, 0).is_err());
}

#[test]
fn inference_and_training_priors_share_layout() {
    let (_, data) = latent_clips(2, 12);
    for kind in StrategyKind::ALL {
        for np in if kind.bottleneck() { vec![1, 5] } else { vec![1] } {
            let s = strategy(kind, np);
            let (_, poses) = inference_references(&s, 6).unwrap();
            assert_eq!(poses.len(), s.layout().np);
            let model = tiny_model(&s, 0);
            let refs = vec![sample_reference_indices(&s, 12, 6, &mut seeded_rng(0, 0)).unwrap()];
            let batch = assemble_batch(&data, &[(0, 6)], &refs, 4).unwrap();
            let prior = model.prior_from_latents(&batch.e_m, &batch.e_i, &batch.e_p).unwrap();
            assert_eq!(prior.shape()[1], s.layout().prior_channels());
        }
    }
}

#[test]
fn audio_crop_matches_full_clip_windows() {
    let (_, data) = latent_clips(1, 50);
    let s = strategy(StrategyKind::RndPlusPrvBN, 1);
    let model = tiny_model(&s, 0);
    let n = data[0].len();
    let full = data[0].grouped.clone().reshape(&[1, 4, 1, n]).unwrap();
    for t in 0..n {
        let refs = vec![RefIndices { identity: Some(0), poses: vec![0] }];
        let batch = assemble_batch(&data, &[(0, t)], &refs, 4).unwrap();
        let (lo, len) = audio_crop(n, t, 4);
        assert_eq!((batch.local_t[0], batch.grouped.shape()[3]), (t - lo, len));
        let mut g = Graph::inference(model.params());
        let a = g.constant(full.clone());
        let a = model.audio_windows(&mut g, a, &[t]).unwrap();
        let b = g.constant(batch.grouped.clone());
        let b = model.audio_windows(&mut g, b, &batch.local_t).unwrap();
        let diff = g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "t={t}: crop differs by {diff}");
    }
}

#[test]
fn loss_decreases_with_training() {
    let (_, data) = latent_clips(8, 20);
    let cfg = TrainConfig { strategy: StrategyKind::RndPlusPrvBN, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&cfg, 0).unwrap();
    let pool = eligible_targets(&data, &trainer.strategy());
    let mut rng = seeded_rng(0, 3);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let batch: Vec<_> =
            (0..cfg.batch_size).map(|_| pool[rand::Rng::random_range(&mut rng, 0..pool.len())]).collect();
        losses.push(trainer.train_step(&data, &batch).unwrap());
    }
    let early = losses[..10].iter().sum::<f64>() / 10.0;
    let late = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(late < early, "loss went from {early} to {late}");
}

#[test]
fn training_leaves_codec_untouched() {
    let codec = Codec::new(0);
    let before = codec.to_checkpoint().to_bytes().unwrap();
    let clips = generate_dataset(4, 2, 12).unwrap();
    let data = encode_clips(&codec, &clips).unwrap();
    let mut trainer = Trainer::new(&tiny_config(StrategyKind::PrvBN, 1), 0).unwrap();
    trainer.train_step(&data, &[(0, 3), (1, 5)]).unwrap();
    assert_eq!(codec.to_checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn frozen_audio_layers_stay_fixed() {
    let (_, data) = latent_clips(2, 12);
    for k in [0, 2, 4] {
        let cfg = TrainConfig { freeze_k: k, ..tiny_config(StrategyKind::RndPlusPrvBN, 1) };
        let mut trainer = Trainer::new(&cfg, 0).unwrap();
        let frozen: Vec<_> = (0..k).flat_map(|l| trainer.model.audio_encoder().layer_params(l)).collect();
        let before = trainer.model.params().clone();
        for _ in 0..3 {
            trainer.train_step(&data, &[(0, 3), (1, 7)]).unwrap();
        }
        for id in before.ids() {
            let same = before.get(id).data() == trainer.model.params().get(id).data();
            assert_eq!(same, frozen.contains(&id), "k={k} {}", before.name(id));
        }
    }
}

#[test]
fn trainer_is_deterministic() {
    let (_, data) = latent_clips(2, 12);
    let cfg = tiny_config(StrategyKind::Rnd, 1);
    let run = || {
        let mut t = Trainer::new(&cfg, 5).unwrap();
        (0..3).map(|_| t.train_step(&data, &[(0, 3), (1, 7)]).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn train_diffusion_writes_loadable_best_checkpoint() {
    let (_, data) = latent_clips(3, 12);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, checkpoint_every: 1, ..tiny_config(StrategyKind::PrvBN, 2) };
    let mut reports = Vec::new();
    let (model, history) = train_diffusion(&cfg, 1, &data, Some(dir.path()), |r| reports.push(r)).unwrap();
    assert_eq!((reports.len(), history.val_loss.len()), (2, 2));
    assert!(dir.path().join("epoch002.ckpt").exists());
    let ck = crate::numcore::Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    let (loaded, s) = load_model(&ck).unwrap();
    assert_eq!(s, strategy(StrategyKind::PrvBN, 2));
    let best = &history.val_loss[history.best_epoch];
    assert!(history.val_loss.iter().all(|v| v >= best));
    for id in model.params().ids() {
        assert_eq!(model.params().get(id).data(), loaded.params().get(id).data());
    }
}

fn synth_fixture(kind: StrategyKind, np: usize) -> (DenoiserModel, Codec, DiffusionSchedule, RefStrategy) {
    let s = strategy(kind, np);
    (tiny_model(&s, 2), Codec::new(0), schedule(), s)
}

#[test]
fn synthesis_keeps_length_and_seed_frame() {
    let (model, codec, schedule, s) = synth_fixture(StrategyKind::RndPlusPrvBN, 2);
    let synth = Synthesizer { model: &model, codec: &codec, schedule: &schedule, strategy: s, ddim_steps: 2 };
    let clip = generate_clip(9, 6).unwrap();
    let out = synth.synthesize_clip(&clip, 0).unwrap();
    assert_eq!(out.len(), clip.len());
    assert_eq!(out[0].data(), clip.frames[0].data());
    assert!(synth.synthesize_clip(&clip.truncated(1), 0).is_err());
}

#[test]
fn synthesis_does_not_read_future_frames() {
    let (model, codec, schedule, s) = synth_fixture(StrategyKind::RndPlusPrvBN, 1);
    let synth = Synthesizer { model: &model, codec: &codec, schedule: &schedule, strategy: s, ddim_steps: 2 };
    let clip = generate_clip(9, 6).unwrap();
    let mut altered = clip.clone();
    for f in &mut altered.frames[3..] {
        f.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    let a = synth.synthesize_clip(&clip, 0).unwrap();
    let b = synth.synthesize_clip(&altered, 0).unwrap();
    assert_eq!(a[..3], b[..3]);
    assert_ne!(a[3], b[3]);
}

#[test]
fn batched_synthesis_matches_single_clips() {
    let (model, codec, schedule, s) = synth_fixture(StrategyKind::Prv, 1);
    let synth = Synthesizer { model: &model, codec: &codec, schedule: &schedule, strategy: s, ddim_steps: 3 };
    let clips: Vec<Clip> = (0..2).map(|i| generate_clip(20 + i, 4).unwrap()).collect();
    let batched = synth.synthesize_clips(&clips, 7).unwrap();
    for (clip, b) in clips.iter().zip(&batched) {
        assert_eq!(&synth.synthesize_clip(clip, 7).unwrap(), b);
    }
}

#[test]
fn synthesis_rejects_mismatched_strategy() {
    let (model, codec, schedule, _) = synth_fixture(StrategyKind::PrvBN, 1);
    let synth = Synthesizer {
        model: &model,
        codec: &codec,
        schedule: &schedule,
        strategy: strategy(StrategyKind::Rnd, 1),
        ddim_steps: 2,
    };
    assert!(synth.synthesize_clip(&generate_clip(1, 4).unwrap(), 0).is_err());
}

#[test]
fn upper_half_psnr_ignores_lower_half_and_seed_frame() {
    let clip = generate_clip(2, 4).unwrap();
    let mut gen = clip.frames.clone();
    gen[0] = crate::spriteworld::Image::filled(32, 32, [0.0; 3]);
    for f in &mut gen[1..] {
        *f = crate::spriteworld::mask_lower_half(f);
    }
    assert_eq!(upper_half_psnr(&gen, &clip.frames).unwrap(), crate::evalkit::PSNR_CAP);
}

#[test]
fn pose_priors_shift_by_one() {
    let clip = generate_clip(2, 4).unwrap();
    let p = pose_priors(&clip.frames);
    assert_eq!(p[0], clip.frames[0]);
    assert_eq!(p[1..], clip.frames[..3]);
}

#[test]
fn config_overrides() {
    let base = TrainConfig::default();
    let kv = |k: &str, v: &str| (k.to_string(), v.to_string());
    let cfg = base
        .with_overrides(&[kv("strategy", "prvbn"), kv("np", "5"), kv("schedule.steps", "500"), kv("batch-size", "4")])
        .unwrap();
    assert_eq!((cfg.strategy, cfg.np, cfg.schedule.steps, cfg.batch_size), (StrategyKind::PrvBN, 5, 500, 4));
    assert!(base.with_overrides(&[kv("nonsense", "1")]).is_err());
    assert!(base.with_overrides(&[kv("strategy", "prv"), kv("np", "5")]).is_err());
    assert!(base.with_overrides(&[kv("lr", "-1")]).is_err());
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn ablation_emits_one_row_per_cell_and_is_deterministic() {
    let codec = Codec::new(0);
    let train = generate_dataset(5, 3, 14).unwrap();
    let eval = generate_dataset(6, 2, 14).unwrap();
    let cfg = tiny_config(StrategyKind::Rnd, 1);
    let cells: Vec<_> = StrategyKind::ALL.iter().map(|&k| strategy(k, 1)).collect();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let report = run_ablation(&cfg, &cells, &train, &eval, &codec, Some(dir.path()), |_| {}).unwrap();
        (report, std::fs::read(dir.path().join(METRICS_CSV)).unwrap())
    };
    let (report, csv) = run();
    assert_eq!(report.metrics.len(), 4);
    assert_eq!(report.probes.len(), 8);
    assert!(report.metrics.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite() && r.rho.is_finite()));
    let names: Vec<_> = report.metrics.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["Rnd", "Prv", "PrvBN", "RndPlusPrvBN"]);
    assert_eq!(run().1, csv);
}

#[test]
fn probe_adaptation_matches_reference_slots() {
    let clip = generate_clip(3, 14).unwrap();
    let items = crate::evalkit::ident_items(&clip, 10, 1, &[0, 1]).unwrap();
    let rnd = adapt_probe_items(items.clone(), &strategy(StrategyKind::Rnd, 1));
    assert_eq!(rnd[1].poses, vec![clip.frames[1].clone()]);
    let prvbn = adapt_probe_items(items, &strategy(StrategyKind::PrvBN, 1));
    assert!(prvbn.iter().all(|i| i.identity.is_none()));
}

proptest! {
    #[test]
    fn audio_crop_bounds(n in 1usize..80, t_frac in 0.0f64..1.0, w in 0usize..6) {
        let t = ((n as f64 * t_frac) as usize).min(n - 1);
        let (lo, len) = audio_crop(n, t, w);
        prop_assert!(lo + len <= n);
        let r = crate::audiofeat::RECEPTIVE_RADIUS;
        prop_assert!(lo <= t.saturating_sub(w + r));
        prop_assert!(lo + len >= (t + w + r + 1).min(n));
    }

    #[test]
    fn inference_poses_never_reach_current_frame(np in 1usize..12, t in 1usize..60) {
        let s = strategy(StrategyKind::RndPlusPrvBN, np);
        let (_, poses) = inference_references(&s, t).unwrap();
        for p in poses {
            prop_assert!(matches!(p, RefSource::Generated(i) if i < t));
        }
    }
}
