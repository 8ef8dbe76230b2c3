use proptest::prelude::*;

use super::*;
use crate::numcore::normal_tensor;
use crate::spriteworld::{generate_clip, mask_lower_half};

#[test]
fn factor_four_at_32_and_16() {
    let codec = Codec::new(1);
    let mut rng = seeded_rng(1, 1);
    for size in [32, 16] {
        let x = normal_tensor(&[2, 3, size, size], &mut rng).map(|v| v.abs().min(1.0));
        let z = codec.encode_tensor(&x).unwrap();
        assert_eq!(z.shape(), &[2, LATENT_CHANNELS, size / FACTOR, size / FACTOR]);
        assert_eq!(codec.decode_tensor(&z).unwrap().shape(), &[2, 3, size, size]);
    }
}

#[test]
fn single_image_round_trip_shapes() {
    let codec = Codec::new(2);
    let frame = generate_clip(2, 2).unwrap().frames[0].clone();
    let z = codec.encode(&frame).unwrap();
    assert_eq!(z.shape(), &[3, 8, 8]);
    let back = codec.decode(&z).unwrap();
    assert_eq!((back.height(), back.width()), (32, 32));
}

#[test]
fn depth_to_space_inverts_space_to_depth() {
    let x = normal_tensor(&[2, 3, 8, 6], &mut seeded_rng(0, 0));
    let params = ParamSet::new();
    let mut g = Graph::inference(&params);
    let v = g.constant(x.clone());
    let packed = space_to_depth(&mut g, v).unwrap();
    assert_eq!(g.shape(packed), &[2, 12, 4, 3]);
    // Channel 4c + 2dy + dx at (i, j) is pixel (2i + dy, 2j + dx) of channel c.
    let p = g.value(packed).data();
    for n in 0..2 {
        for c in 0..3 {
            for y in 0..8 {
                for xx in 0..6 {
                    let ch = 4 * c + 2 * (y % 2) + xx % 2;
                    let packed_at = ((n * 12 + ch) * 4 + y / 2) * 3 + xx / 2;
                    assert_eq!(p[packed_at], x.data()[((n * 3 + c) * 8 + y) * 6 + xx]);
                }
            }
        }
    }
    let back = depth_to_space(&mut g, packed).unwrap();
    assert_eq!(g.value(back), &x);
}

#[test]
fn encode_is_deterministic() {
    let codec = Codec::new(3);
    let frame = generate_clip(3, 2).unwrap().frames[1].clone();
    assert_eq!(codec.encode(&frame).unwrap(), codec.encode(&frame).unwrap());
}

#[test]
fn wrong_shapes_are_rejected() {
    let codec = Codec::new(4);
    assert!(codec.encode_tensor(&Tensor::zeros(&[1, 3, 30, 32])).is_err());
    assert!(codec.encode_tensor(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
    assert!(codec.decode_tensor(&Tensor::zeros(&[1, 4, 8, 8])).is_err());
    assert!(codec.decode_tensor(&Tensor::zeros(&[3, 8, 8])).is_err());
}

/// Tracing the encoder: a change in image rows `>= 16` reaches packed rows
/// `>= 8`, stem rows `>= 7`, residual rows `>= 6` and, through the stride-2
/// stage, latent rows `>= 3`: one row above the latent lower half.
#[test]
fn lower_half_changes_stay_in_lower_latent_rows() {
    let codec = Codec::new(5);
    for seed in 0..5 {
        let frame = generate_clip(seed, 2).unwrap().frames[0].clone();
        let za = codec.encode(&frame).unwrap();
        let zb = codec.encode(&mask_lower_half(&frame)).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                let row = |z: &Tensor| z.data()[(c * 8 + y) * 8..(c * 8 + y + 1) * 8].to_vec();
                if y < 3 {
                    assert_eq!(row(&za), row(&zb), "channel {c} row {y}");
                }
            }
        }
        assert_ne!(za, zb);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut codec = Codec::new(6);
    let frames = generate_clip(6, 4).unwrap().frames;
    codec.fit_standardization(&frames).unwrap();
    let restored =
        Codec::from_checkpoint(&Checkpoint::from_bytes(&codec.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(restored.params(), codec.params());
    assert_eq!(restored.latent_stats(), codec.latent_stats());
    assert!(codec.to_checkpoint().names().all(|n| n.starts_with("codec.")));
}

#[test]
fn standardized_latents_have_unit_scale() {
    let mut codec = Codec::new(7);
    let frames = generate_clip(7, 30).unwrap().frames;
    codec.fit_standardization(&frames).unwrap();
    let z = codec.encode_batch(&frames).unwrap();
    let inner = 64;
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..frames.len()).flat_map(|n| z.data()[(n * 3 + c) * inner..(n * 3 + c + 1) * inner].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "channel {c}: mean {m}, var {v}");
    }
}

#[test]
fn training_rejects_empty_sets() {
    let frames = generate_clip(8, 2).unwrap().frames;
    assert!(train_codec(&[], &frames, &CodecTrainConfig::default()).is_err());
    assert!(train_codec(&frames, &[], &CodecTrainConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decode_output_is_clamped(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let codec = Codec::new(seed);
        let z = normal_tensor(&[1, 3, 8, 8], &mut seeded_rng(seed, 2)).map(|v| v * scale);
        let y = codec.decode_tensor(&z).unwrap();
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let codec = Codec::new(3);
    let clip = generate_clip(5, 2).unwrap();
    let x = images_to_tensor(&clip.frames).unwrap();
    let eval = |c: &Codec| {
        let mut g = Graph::inference(&c.params);
        let l = c.loss(&mut g, &x).unwrap();
        g.value(l).item()
    };
    let grads = {
        let mut g = Graph::train(&codec.params);
        let l = codec.loss(&mut g, &x).unwrap();
        g.backward(l).unwrap()
    };
    let ids: Vec<_> = codec.params.ids().collect();
    for id in ids {
        let n = codec.params.get(id).numel();
        for j in [0, n / 2, n - 1] {
            let h = 1e-5;
            let mut plus = codec.clone();
            plus.params.get_mut(id).data_mut()[j] += h;
            let mut minus = codec.clone();
            minus.params.get_mut(id).data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grads.get(id).data()[j];
            assert!(
                (fd - an).abs() <= 1e-5 + 1e-3 * fd.abs(),
                "{}[{j}]: fd {fd} vs analytic {an}",
                codec.params.name(id)
            );
        }
    }
}
