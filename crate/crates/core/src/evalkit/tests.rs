use proptest::prelude::*;

use super::*;
use crate::diffcore::{make_schedule, DenoiserModel, ModelConfig, PriorLayout};
use crate::latentcodec::Codec;
use crate::spriteworld::{
    generate_clip, generate_dataset, render_frame, IdentityParams, Image, PoseParams, IMAGE_SIZE,
};

/// Single-window SSIM of constants 0.5 and 0.6 from the closed form, evaluated in exact rationals.
const SSIM_HALF_VS_POINT_SIX: f64 = 0.983_609_244_386_166_1;

fn grey(v: f64) -> Image {
    Image::filled(IMAGE_SIZE, IMAGE_SIZE, [v; 3])
}

fn constant_aperture_frames(n: usize, a: f64) -> Vec<Image> {
    let id = IdentityParams::from_seed(3);
    (0..n).map(|_| render_frame(&id, &PoseParams::default(), a).unwrap()).collect()
}

#[test]
fn psnr_cap_and_reference_value() {
    assert_eq!(psnr_images(&grey(0.3), &grey(0.3)).unwrap(), PSNR_CAP);
    assert!((psnr_images(&grey(0.0), &grey(0.1)).unwrap() - 20.0).abs() < 1e-9);
    assert!((psnr(&[0.0, 0.0], &[0.2, 0.0]).unwrap() - 10.0 * (1.0 / 0.02f64).log10()).abs() < 1e-12);
    assert!(psnr(&[0.0], &[0.0, 1.0]).is_err());
    assert!(psnr_images(&grey(0.0), &Image::filled(8, 8, [0.0; 3])).is_err());
}

#[test]
fn psnr_video_pools_errors() {
    let a = vec![grey(0.0), grey(0.0)];
    let b = vec![grey(0.0), grey(0.2)];
    assert!((psnr_video(&a, &b).unwrap() - 10.0 * (1.0 / 0.02f64).log10()).abs() < 1e-9);
    assert!(psnr_video(&a, &b[..1]).is_err());
}

#[test]
fn ssim_identity_symmetry_and_constants() {
    let clip = generate_clip(7, 3).unwrap();
    let (a, b) = (&clip.frames[0], &clip.frames[2]);
    assert!((ssim(a, a).unwrap() - 1.0).abs() < 1e-12);
    assert!((ssim(a, b).unwrap() - ssim(b, a).unwrap()).abs() < 1e-12);
    assert!(ssim(a, b).unwrap() < 1.0);
    // Luma weights sum to 1 only up to rounding.
    assert!((ssim(&grey(0.5), &grey(0.6)).unwrap() - SSIM_HALF_VS_POINT_SIX).abs() < 1e-10);
    assert!(ssim(a, &Image::filled(16, 16, [0.0; 3])).is_err());
    assert!(ssim_video(&[], &[]).is_err());
}

#[test]
fn sync_of_rendered_clip_is_high_at_zero_lag() {
    for seed in 0..5 {
        let clip = generate_clip(seed, 50).unwrap();
        let s = sync_score(&clip.frames, &clip.driving_signal).unwrap();
        assert!(s.rho >= 0.95 && s.lag == 0 && !s.degenerate, "seed {seed}: {s:?}");
    }
}

#[test]
fn shuffled_frames_lose_sync() {
    use rand::seq::SliceRandom;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let clip = generate_clip(100 + seed, 100).unwrap();
        let mut perm: Vec<usize> = (0..clip.len()).collect();
        perm.shuffle(&mut crate::numcore::seeded_rng(seed, 0));
        let shuffled: Vec<Image> = perm.iter().map(|&i| clip.frames[i].clone()).collect();
        worst = worst.max(sync_score(&shuffled, &clip.driving_signal).unwrap().rho.abs());
    }
    assert!(worst <= 0.3, "max |rho| over shuffles {worst}");
}

#[test]
fn constant_aperture_is_degenerate() {
    let frames = constant_aperture_frames(16, 0.4);
    let s = sync_score(&frames, &generate_clip(1, 16).unwrap().driving_signal).unwrap();
    assert_eq!(s, SyncScore { rho: 0.0, lag: 0, degenerate: true });
    assert!(sync_score(&frames[..11], &vec![0.5; 44]).is_err());
    assert!(sync_score(&frames, &vec![0.5; 60]).is_err());
}

#[test]
fn lag_is_recovered_for_delayed_frames() {
    let clip = generate_clip(9, 60).unwrap();
    let target = crate::spriteworld::group_means(&clip.driving_signal);
    let measured = apertures(&clip.frames);
    let delayed: Vec<f64> = (0..measured.len()).map(|t| measured[t.saturating_sub(2)]).collect();
    assert_eq!(sync_from_apertures(&delayed, &target).lag, 2);
}

#[test]
fn copy_score_signs() {
    let clip = generate_clip(11, 50).unwrap();
    let prev: Vec<Image> = (0..clip.len()).map(|t| clip.frames[t.saturating_sub(1)].clone()).collect();
    let copying = copy_score(&prev, &prev, &clip.driving_signal).unwrap();
    assert!(copying > 0.0 && copying < 1.0, "copying {copying}");
    let faithful = copy_score(&clip.frames, &prev, &clip.driving_signal).unwrap();
    assert!(faithful < 0.0, "faithful {faithful}");
    let flat = constant_aperture_frames(50, 0.3);
    assert_eq!(copy_score(&flat, &prev, &clip.driving_signal).unwrap(), 0.0);
    assert!(copy_score(&flat[..10], &prev, &clip.driving_signal).is_err());
}

#[test]
fn greyout_cases() {
    let clip = generate_clip(4, 6).unwrap();
    let mut flat = clip.frames[0].clone();
    for y in IMAGE_SIZE / 2..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            flat.set_pixel(y, x, [0.5; 3]);
        }
    }
    assert!(lip_contrast(&flat) < 1e-12);
    assert_eq!(greyout_score(&[]), 0.0);
    let mut upper = clip.frames[0].clone();
    for y in 0..IMAGE_SIZE / 2 {
        for x in 0..IMAGE_SIZE {
            upper.set_pixel(y, x, [0.1, 0.7, 0.2]);
        }
    }
    assert_eq!(lip_contrast(&upper), lip_contrast(&clip.frames[0]));
    assert!(is_greyed_out(greyout_score(&[flat])));
    assert!(!is_greyed_out(greyout_score(&clip.frames)));
}

#[test]
fn greyout_reference_matches_calibration_set() {
    let clips = generate_dataset(0xca1, 64, 50).unwrap();
    let c = clips.iter().map(|c| greyout_score(&c.frames)).sum::<f64>() / clips.len() as f64;
    assert!((c - GREYOUT_REFERENCE).abs() < 1e-12, "calibration {c}");
}

fn two_pass_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().zip(y).map(|(a, b)| ((a - mx) / sx) * ((b - my) / sy)).sum::<f64>() / n
}

#[test]
fn pearson_edge_cases() {
    assert_eq!(pearson(&[1.0], &[2.0]), None);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert_eq!(pearson(&[1.0, 2.0], &[1.0]), None);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
}

#[test]
fn csv_round_trip() {
    let rows = vec![
        MetricRow {
            strategy: "Prv".into(),
            np: 1,
            seed: 2,
            clip: 0,
            psnr: 24.5,
            ssim: 0.91,
            rho: 0.1,
            lag: -3,
            copy_score: 0.4,
            greyout: 0.05,
            degenerate_flag: false,
        },
        MetricRow {
            strategy: "PrvBN".into(),
            np: 1,
            seed: 2,
            clip: 1,
            psnr: 1.0 / 3.0,
            ssim: 0.5,
            rho: 0.0,
            lag: 0,
            copy_score: 0.0,
            greyout: 0.2,
            degenerate_flag: true,
        },
    ];
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "strategy,np,seed,clip,psnr,ssim,rho,lag,copy_score,greyout,degenerate_flag");
    assert_eq!(read_csv::<MetricRow>(buf.as_slice()).unwrap(), rows);
    assert_eq!(mean_by(&rows, "Prv", 2, |r| r.psnr), Some(24.5));
    assert_eq!(mean_by(&rows, "Rnd", 2, |r| r.psnr), None);
}

#[test]
fn evaluate_clip_on_ground_truth() {
    let clip = generate_clip(21, 20).unwrap();
    let key = ExperimentKey { strategy: "GT".into(), np: 1, seed: 0 };
    let prev: Vec<Image> = (0..clip.len()).map(|t| clip.frames[t.saturating_sub(1)].clone()).collect();
    let row = evaluate_clip(&key, 3, &clip.frames, &clip.frames, &prev, &clip.driving_signal).unwrap();
    assert_eq!((row.psnr, row.ssim, row.clip), (PSNR_CAP, 1.0, 3));
    assert!(row.rho >= 0.95 && row.copy_score < 0.0);
}

fn probe_fixture() -> (DenoiserModel, Codec, crate::diffcore::DiffusionSchedule) {
    let layout = PriorLayout { np: 1, bottleneck: true };
    let model = DenoiserModel::new(ModelConfig { layout, base_channels: 8, low_channels: 16, window: 4 }, 1).unwrap();
    (model, Codec::new(1), make_schedule(1000, 1e-4, 0.02).unwrap())
}

#[test]
fn variance_probe_zero_for_identical_items_and_positive_otherwise() {
    let (model, codec, schedule) = probe_fixture();
    let clip = generate_clip(5, 20).unwrap();
    let same = ident_items(&clip, 10, 1, &[3; 10]).unwrap();
    let spec = ProbeSpec { setting: ProbeSetting::Ident, items: same, d: PROBE_STEP, noise_seed: 1 };
    let r = variance_probe(&model, &codec, &schedule, &spec).unwrap();
    assert_eq!((r.variance, r.items, r.d), (0.0, 10, PROBE_STEP));

    let mut items = ident_items(&clip, 10, 1, &[3; 10]).unwrap();
    items[4].identity = Some(clip.frames[15].clone());
    let spec = ProbeSpec { items, ..spec };
    assert!(variance_probe(&model, &codec, &schedule, &spec).unwrap().variance > 0.0);
}

#[test]
fn variance_probe_requires_enough_items() {
    let (model, codec, schedule) = probe_fixture();
    let clip = generate_clip(6, 20).unwrap();
    let ident = ident_items(&clip, 5, 1, &(0..9).collect::<Vec<_>>()).unwrap();
    let spec = ProbeSpec { setting: ProbeSetting::Ident, items: ident, d: PROBE_STEP, noise_seed: 0 };
    assert!(variance_probe(&model, &codec, &schedule, &spec).is_err());
    let pose = pose_items(&clip, 5, 1, 0, 4, 0).unwrap();
    let spec = ProbeSpec { setting: ProbeSetting::Pose, items: pose, d: PROBE_STEP, noise_seed: 0 };
    assert!(variance_probe(&model, &codec, &schedule, &spec).is_err());
    assert!(ident_items(&clip, 0, 1, &[1]).is_err());
}

#[test]
fn pose_items_share_aperture_and_identity() {
    let clip = generate_clip(8, 20).unwrap();
    let items = pose_items(&clip, 12, 2, 0, 5, 3).unwrap();
    let a = crate::spriteworld::measure_aperture(&items[0].target);
    for it in &items {
        assert!((crate::spriteworld::measure_aperture(&it.target) - a).abs() < 0.05);
        assert_eq!(it.identity.as_ref(), Some(&clip.frames[0]));
        assert_eq!(it.poses.len(), 2);
    }
    assert_ne!(items[0].target, items[1].target);
}

#[test]
fn mean_dimension_variance_matches_hand_value() {
    let rows = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
    assert_eq!(mean_dimension_variance(&rows), 0.5);
    assert_eq!(mean_dimension_variance(&[]), 0.0);
}

proptest! {
    #[test]
    fn pearson_matches_two_pass_oracle(
        xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..60)
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Some(r) = pearson(&x, &y) {
            prop_assert!((r - two_pass_pearson(&x, &y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_are_symmetric(seed in 0u64..1000) {
        let clip = generate_clip(seed, 2).unwrap();
        let (a, b) = (&clip.frames[0], &clip.frames[1]);
        prop_assert_eq!(psnr_images(a, b).unwrap(), psnr_images(b, a).unwrap());
        prop_assert!((ssim(a, b).unwrap() - ssim(b, a).unwrap()).abs() <= 1e-12);
        prop_assert!(lip_contrast(a) >= 0.0);
    }
}
