use proptest::prelude::*;

use super::*;
use crate::audiofeat::AUDIO_DIM;
use crate::numcore::{normal_tensor, seeded_rng, AdamConfig, AdamState, Graph, Tensor};

/// `ᾱ_1000` of the default schedule from an exact rational product of `1 − β_d`.
const ALPHA_BAR_1000: f64 = 4.035_829_765_375_683_5e-5;

fn default_schedule() -> DiffusionSchedule {
    make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
}

fn tiny(layout: PriorLayout) -> DenoiserModel {
    let cfg = ModelConfig { layout, base_channels: 8, low_channels: 16, window: 4 };
    DenoiserModel::new(cfg, 3).unwrap()
}

fn bn_layout(np: usize) -> PriorLayout {
    PriorLayout { np, bottleneck: true }
}

fn randomize_head(model: &mut DenoiserModel, seed: u64) {
    let mut rng = seeded_rng(seed, 77);
    let p = model.params_mut();
    let id = p.lookup("diff.unet.conv_out.w").unwrap();
    let shape = p.get(id).shape().to_vec();
    *p.get_mut(id) = normal_tensor(&shape, &mut rng).map(|v| 0.1 * v).with_grad();
}

fn random_inputs(model: &DenoiserModel, b: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = seeded_rng(seed, 5);
    let z = normal_tensor(&[b, 3, 8, 8], &mut rng);
    let v = normal_tensor(&[b, model.layout().prior_channels(), 8, 8], &mut rng);
    let a = normal_tensor(&[b, 9, AUDIO_DIM], &mut rng);
    (z, v, a)
}

/// Returns the true noise given the known clean latent.
struct Oracle {
    z0: Tensor,
    schedule: DiffusionSchedule,
}

impl EpsPredictor for Oracle {
    fn predict(&self, z_d: &Tensor, d: usize) -> crate::Result<Tensor> {
        let ab = self.schedule.alpha_bar(d);
        Tensor::new(
            z_d.shape(),
            z_d.data().iter().zip(self.z0.data()).map(|(z, x)| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect(),
        )
    }
}

#[test]
fn schedule_endpoints() {
    let s = default_schedule();
    assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    assert!((s.alpha_bar(1000) - ALPHA_BAR_1000).abs() <= 1e-12);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.ddim_steps(), 200);
}

#[test]
fn schedule_is_monotone_and_bounded() {
    let s = default_schedule();
    for d in 1..=1000 {
        assert!(s.beta(d) > 0.0 && s.beta(d) < 1.0);
        assert!(s.alpha_bar(d) < s.alpha_bar(d - 1));
    }
}

#[test]
fn schedule_rejects_bad_endpoints() {
    for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
        assert!(make_schedule(t, a, b).is_err());
    }
    assert!(make_schedule(1, 0.5, 0.5).is_ok());
}

#[test]
fn ddim_timesteps_are_even_and_descending() {
    let s = default_schedule();
    assert_eq!(s.ddim_timesteps(1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
    let t = s.ddim_timesteps(200).unwrap();
    assert_eq!(t.len(), 200);
    assert_eq!((t[0], t[199]), (1000, 5));
    assert!(t.windows(2).all(|w| w[0] - w[1] == 5));
    assert!(s.ddim_timesteps(0).is_err() && s.ddim_timesteps(1001).is_err());
}

#[test]
fn forward_diffuse_zero_noise_and_limit() {
    let s = default_schedule();
    let mut rng = seeded_rng(1, 1);
    let z0 = normal_tensor(&[3, 8, 8], &mut rng);
    let eps = normal_tensor(&[3, 8, 8], &mut rng);
    let zd = forward_diffuse(&s, &z0, 300, &Tensor::zeros(&[3, 8, 8])).unwrap();
    let k = s.alpha_bar(300).sqrt();
    assert!(zd.data().iter().zip(z0.data()).all(|(a, b)| *a == k * b));
    let near = forward_diffuse(&s, &z0, 1, &eps).unwrap();
    let scale = z0.data().iter().chain(eps.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(near.max_abs_diff(&z0) <= 0.02 * scale);
    assert!(forward_diffuse(&s, &z0, 0, &eps).is_err());
    assert!(forward_diffuse(&s, &z0, 1001, &eps).is_err());
    assert!(forward_diffuse(&s, &z0, 5, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn forward_diffuse_monte_carlo_moments() {
    let s = default_schedule();
    let n = 100_000;
    let z0_value = 100.0;
    for (i, d) in [100usize, 500, 900].into_iter().enumerate() {
        let mut rng = seeded_rng(42, i as u64);
        let eps = normal_tensor(&[n], &mut rng);
        let zd = forward_diffuse(&s, &Tensor::full(&[n], z0_value), d, &eps).unwrap();
        let mean = zd.data().iter().sum::<f64>() / n as f64;
        let var = zd.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(d);
        let want_mean = ab.sqrt() * z0_value;
        assert!((mean - want_mean).abs() <= 0.01 * want_mean, "d={d}: mean {mean} vs {want_mean}");
        assert!((var - (1.0 - ab)).abs() <= 0.01 * (1.0 - ab), "d={d}: var {var} vs {}", 1.0 - ab);
    }
}

#[test]
fn ddim_with_oracle_recovers_clean_latent() {
    let s = default_schedule();
    let mut rng = seeded_rng(2, 2);
    let z0 = normal_tensor(&[2, 3, 8, 8], &mut rng);
    let oracle = Oracle { z0: z0.clone(), schedule: s.clone() };
    for n in [1, 50, 200, 1000] {
        let mut worst: f64 = 0.0;
        let zt = normal_tensor(&[2, 3, 8, 8], &mut rng);
        let out = ddim_sample_from(&s, &oracle, zt, n, |_, x0| worst = worst.max(x0.max_abs_diff(&z0))).unwrap();
        assert!(worst <= 1e-10, "n={n}: x0 error {worst}");
        assert!(out.max_abs_diff(&z0) <= 1e-8, "n={n}: final error {}", out.max_abs_diff(&z0));
    }
}

#[test]
fn ddim_rejects_zero_steps() {
    let s = default_schedule();
    let oracle = Oracle { z0: Tensor::zeros(&[1, 3, 8, 8]), schedule: s.clone() };
    assert!(ddim_sample(&s, &oracle, &[1, 3, 8, 8], &mut seeded_rng(0, 0), 0).is_err());
}

#[test]
fn channel_layout_contract() {
    for (np, prior, unet) in [(1, 7, 10), (5, 11, 14), (10, 16, 19)] {
        let layout = bn_layout(np);
        assert_eq!((layout.prior_channels(), layout.unet_in_channels()), (prior, unet));
        let model = tiny(layout);
        assert_eq!(model.unet_in_channels(), unet);
        let mut rng = seeded_rng(np as u64, 0);
        let lat = |rng: &mut _| Tensor::stack(&[&normal_tensor(&[3, 8, 8], rng)]).unwrap();
        let poses: Vec<Tensor> = (0..np).map(|_| lat(&mut rng)).collect();
        let ev = model.prior_from_latents(&lat(&mut rng), &lat(&mut rng), &poses).unwrap();
        assert_eq!(ev.shape(), &[1, prior, 8, 8]);
    }
    assert_eq!(PriorLayout { np: 1, bottleneck: false }.unet_in_channels(), 12);
}

#[test]
fn prior_rejects_wrong_pose_count() {
    let model = tiny(bn_layout(2));
    let z = Tensor::zeros(&[1, 3, 8, 8]);
    assert!(model.prior_from_latents(&z, &z, &[]).is_err());
    assert!(model.prior_from_latents(&z, &z, std::slice::from_ref(&z)).is_err());
    assert!(DenoiserModel::new(ModelConfig::new(bn_layout(0)), 0).is_err());
}

#[test]
fn bottleneck_is_shared_across_pose_frames() {
    let model = tiny(bn_layout(3));
    let mut rng = seeded_rng(4, 0);
    let p = normal_tensor(&[1, 3, 8, 8], &mut rng);
    let z = normal_tensor(&[1, 3, 8, 8], &mut rng);
    let ev = model.prior_from_latents(&z, &z, &[p.clone(), p.clone(), p]).unwrap();
    let plane = |c: usize| ev.data()[c * 64..(c + 1) * 64].to_vec();
    assert_eq!(plane(6), plane(7));
    assert_eq!(plane(7), plane(8));
}

#[test]
fn zero_head_predicts_zero() {
    let model = tiny(bn_layout(1));
    let (z, v, a) = random_inputs(&model, 3, 1);
    for d in [1, 500, 1000] {
        assert!(model.predict_eps(&z, d, &v, &a).unwrap().data().iter().all(|&e| e == 0.0));
    }
}

#[test]
fn predict_eps_is_finite_and_shaped_for_all_steps() {
    let mut model = tiny(bn_layout(1));
    randomize_head(&mut model, 1);
    let (z, v, a) = random_inputs(&model, 2, 2);
    for d in (1..=1000).step_by(37).chain([1000]) {
        let e = model.predict_eps(&z, d, &v, &a).unwrap();
        assert_eq!(e.shape(), z.shape());
        assert!(e.is_finite());
    }
}

#[test]
fn audio_conditioning_is_live() {
    let mut model = tiny(bn_layout(1));
    randomize_head(&mut model, 2);
    let (z, v, a) = random_inputs(&model, 2, 3);
    let a2 = normal_tensor(a.shape(), &mut seeded_rng(9, 9));
    let e1 = model.predict_eps(&z, 400, &v, &a).unwrap();
    let e2 = model.predict_eps(&z, 400, &v, &a2).unwrap();
    assert!(e1.max_abs_diff(&e2) > 0.0);
}

#[test]
fn audio_window_order_matters() {
    let mut model = tiny(bn_layout(1));
    randomize_head(&mut model, 2);
    let (z, v, a) = random_inputs(&model, 1, 3);
    let d = AUDIO_DIM;
    let mut reversed = a.clone();
    for i in 0..9 {
        reversed.data_mut()[i * d..(i + 1) * d].copy_from_slice(&a.data()[(8 - i) * d..(9 - i) * d]);
    }
    let e1 = model.predict_eps(&z, 400, &v, &a).unwrap();
    let e2 = model.predict_eps(&z, 400, &v, &reversed).unwrap();
    assert!(e1.max_abs_diff(&e2) > 1e-6);
}

#[test]
fn predict_eps_rejects_shape_mismatch() {
    let model = tiny(bn_layout(1));
    let (z, v, a) = random_inputs(&model, 2, 4);
    assert!(model.predict_eps(&z, 10, &Tensor::zeros(&[2, 8, 8, 8]), &a).is_err());
    assert!(model.predict_eps(&Tensor::zeros(&[1, 3, 8, 8]), 10, &v, &a).is_err());
    assert!(model.predict_eps(&z, 10, &v, &Tensor::zeros(&[2, 9, 5])).is_err());
}

fn loss_and_grads(model: &DenoiserModel, seed: u64) -> (f64, crate::numcore::ParamGrads) {
    let s = default_schedule();
    let mut rng = seeded_rng(seed, 11);
    let z0 = normal_tensor(&[4, 3, 8, 8], &mut rng);
    let lat = |rng: &mut _| normal_tensor(&[4, 3, 8, 8], rng);
    let (e_m, e_i, e_p) = (lat(&mut rng), lat(&mut rng), lat(&mut rng));
    let grouped = normal_tensor(&[4, 4, 1, 20], &mut rng);
    let mut g = Graph::train(model.params());
    let (m, i, p) = (g.constant(e_m), g.constant(e_i), g.constant(e_p));
    let ev = model.assemble_prior(&mut g, m, i, &[p]).unwrap();
    let gv = g.constant(grouped);
    let ea = model.audio_windows(&mut g, gv, &[0, 5, 10, 19]).unwrap();
    let loss = ldm_loss(&s, model, &mut g, &z0, ev, ea, &mut rng).unwrap();
    let value = g.value(loss).item();
    (value, g.backward(loss).unwrap())
}

#[test]
fn bottleneck_receives_gradient_once_the_head_is_live() {
    let mut model = tiny(bn_layout(1));
    let (_, grads) = loss_and_grads(&model, 1);
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    adam.step(model.params_mut(), &grads).unwrap();
    let (_, grads) = loss_and_grads(&model, 2);
    let bn = model.bn().weight;
    assert!(grads.get(bn).data().iter().any(|&g| g != 0.0));
}

#[test]
fn untrained_loss_is_mean_squared_noise() {
    let model = tiny(bn_layout(1));
    let s = default_schedule();
    let mut rng = seeded_rng(5, 5);
    let mut total = 0.0;
    let (batches, b) = (100, 100);
    for _ in 0..batches {
        let z0 = normal_tensor(&[b, 3, 8, 8], &mut rng);
        let mut g = Graph::inference(model.params());
        let ev = g.constant(normal_tensor(&[b, 7, 8, 8], &mut rng));
        let ea = g.constant(normal_tensor(&[b, 9, AUDIO_DIM], &mut rng));
        let loss = ldm_loss(&s, &model, &mut g, &z0, ev, ea, &mut rng).unwrap();
        total += g.value(loss).item();
    }
    let mean = total / batches as f64;
    assert!((mean - 1.0).abs() <= 0.03, "mean loss {mean}");
}

#[test]
fn loss_is_zero_for_a_perfect_predictor() {
    let s = default_schedule();
    let z0 = normal_tensor(&[2, 3, 8, 8], &mut seeded_rng(0, 3));
    let (ds, eps, zd) = sample_noising(&s, &z0, &mut seeded_rng(0, 4)).unwrap();
    let params = crate::numcore::ParamSet::new();
    let mut g = Graph::inference(&params);
    let (a, b) = (g.constant(eps.clone()), g.constant(eps));
    let l = g.mse(a, b).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert_eq!(forward_diffuse_batch(&s, &z0, &ds, &Tensor::zeros(z0.shape())).unwrap().shape(), zd.shape());
}

#[test]
fn ddim_with_model_is_deterministic_and_finite() {
    let mut model = tiny(bn_layout(1));
    randomize_head(&mut model, 3);
    let s = default_schedule();
    let (_, v, a) = random_inputs(&model, 2, 6);
    let cond = Conditioned { model: &model, e_v: &v, e_a: &a };
    for n in [50, 200] {
        let x = ddim_sample(&s, &cond, &[2, 3, 8, 8], &mut seeded_rng(8, 0), n).unwrap();
        let y = ddim_sample(&s, &cond, &[2, 3, 8, 8], &mut seeded_rng(8, 0), n).unwrap();
        assert_eq!(x, y);
        assert!(x.is_finite());
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut model = tiny(bn_layout(2));
    randomize_head(&mut model, 4);
    let ck = crate::numcore::Checkpoint::from_bytes(&model.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let restored = DenoiserModel::from_checkpoint(&ck).unwrap();
    assert_eq!(restored.params(), model.params());
    assert_eq!(restored.config(), model.config());
    assert!(ck.names().all(|n| n.starts_with("diff.") || n.starts_with("audio.")));
}

/// Least-squares per-pixel linear probe `y ≈ W x + b`, returning held-out MSE.
#[allow(clippy::needless_range_loop)]
fn probe_mse(train_x: &[Vec<f64>], train_y: &[Vec<f64>], test_x: &[Vec<f64>], test_y: &[Vec<f64>]) -> f64 {
    let k = train_x[0].len() + 1;
    let aug = |x: &Vec<f64>| x.iter().copied().chain([1.0]).collect::<Vec<_>>();
    let mut ata = vec![vec![0.0; k]; k];
    let mut aty = vec![vec![0.0; train_y[0].len()]; k];
    for (x, y) in train_x.iter().zip(train_y) {
        let a = aug(x);
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += a[i] * a[j];
            }
            for (o, yo) in y.iter().enumerate() {
                aty[i][o] += a[i] * yo;
            }
        }
    }
    // Gauss-Jordan on the normal equations.
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
        ata.swap(col, piv);
        aty.swap(col, piv);
        let p = ata[col][col];
        for j in 0..k {
            ata[col][j] /= p;
        }
        aty[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..k {
            if r != col {
                let f = ata[r][col];
                for j in 0..k {
                    ata[r][j] -= f * ata[col][j];
                }
                let row = aty[col].clone();
                aty[r].iter_mut().zip(row).for_each(|(v, c)| *v -= f * c);
            }
        }
    }
    let mut err = 0.0;
    let mut n = 0.0;
    for (x, y) in test_x.iter().zip(test_y) {
        let a = aug(x);
        for (o, yo) in y.iter().enumerate() {
            let pred: f64 = (0..k).map(|i| a[i] * aty[i][o]).sum();
            err += (pred - yo).powi(2);
            n += 1.0;
        }
    }
    err / n
}

#[test]
fn bottleneck_restricts_linearly_decodable_information() {
    let model = tiny(bn_layout(1));
    let mut rng = seeded_rng(6, 6);
    let make = |rng: &mut _| {
        let p = normal_tensor(&[64, 3, 8, 8], rng);
        let zero = Tensor::zeros(&[64, 3, 8, 8]);
        let ev = model.prior_from_latents(&zero, &zero, std::slice::from_ref(&p)).unwrap();
        let mut raw = Vec::new();
        let mut squeezed = Vec::new();
        for n in 0..64 {
            for px in 0..64 {
                raw.push((0..3).map(|c| p.data()[(n * 3 + c) * 64 + px]).collect::<Vec<_>>());
                squeezed.push(vec![ev.data()[(n * 7 + 6) * 64 + px]]);
            }
        }
        (raw, squeezed)
    };
    let (train_raw, train_bn) = make(&mut rng);
    let (test_raw, test_bn) = make(&mut rng);
    let from_bn = probe_mse(&train_bn, &train_raw, &test_bn, &test_raw);
    let from_raw = probe_mse(&train_raw, &train_raw, &test_raw, &test_raw);
    assert!(from_bn > 1.5 * from_raw.max(1e-12), "bottleneck probe {from_bn}, raw probe {from_raw}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layout_arithmetic(np in 1usize..16, bottleneck in any::<bool>()) {
        let l = PriorLayout { np, bottleneck };
        let per = if bottleneck { 1 } else { 3 };
        prop_assert_eq!(l.prior_channels(), 6 + per * np);
        prop_assert_eq!(l.unet_in_channels(), l.prior_channels() + 3);
    }

    #[test]
    fn ddim_step_preserves_oracle_x0(d in 2usize..=1000, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let s = default_schedule();
        let mut rng = seeded_rng(seed, 0);
        let z0 = normal_tensor(&[12], &mut rng);
        let eps = normal_tensor(&[12], &mut rng);
        let zd = forward_diffuse(&s, &z0, d, &eps).unwrap();
        let d_next = ((d - 1) as f64 * frac) as usize;
        let (x0, next) = ddim_step(&s, &zd, &eps, d, d_next).unwrap();
        prop_assert!(x0.max_abs_diff(&z0) <= 1e-9);
        let want = if d_next == 0 { z0.clone() } else { forward_diffuse(&s, &z0, d_next, &eps).unwrap() };
        prop_assert!(next.max_abs_diff(&want) <= 1e-9);
    }
}
