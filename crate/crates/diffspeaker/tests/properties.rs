//! Randomized invariants over the bias builders, schedules, losses and
//! the on-disk formats.

use diffspeaker::attention::{
    cross_attention_bias, is_masked, self_attention_bias, variant_biases, AttentionVariant,
};
use diffspeaker::data::{
    generate_dataset, load_audio, load_motion, save_audio, save_motion, SyntheticDatasetSpec,
};
use diffspeaker::diffusion::{
    forward_noise, make_schedule, standard_normal, ScheduleKind,
};
use diffspeaker::training::{rec_loss, total_loss, vel_loss};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_bias_closed_form(t in 1usize..=64) {
        let b = cross_attention_bias(t);
        prop_assert_eq!(b.data.shape(), &[t, t + 2]);
        for i in 0..t {
            for j in 0..t + 2 {
                let expect_open = j < 2 || j == i + 2;
                prop_assert_eq!(!is_masked(b.data[[i, j]]), expect_open);
                if expect_open {
                    prop_assert_eq!(b.data[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn self_bias_closed_form(t in 1usize..=64, p in prop::sample::select(vec![1usize, 2, 25])) {
        let b = self_attention_bias(t, p);
        prop_assert_eq!(b.data.shape(), &[t, t + 2]);
        for i in 0..t {
            prop_assert_eq!(b.data[[i, 0]], 0.0);
            prop_assert_eq!(b.data[[i, 1]], 0.0);
            for j in 0..t {
                let d = i.abs_diff(j);
                prop_assert_eq!(b.data[[i, j + 2]], -((d / p) as f64));
            }
            // the zero band spans 2p - 1 positions around the diagonal
            let zero_count = (0..t).filter(|&j| b.data[[i, j + 2]] == 0.0).count();
            let lo = i.saturating_sub(p - 1);
            let hi = (i + p - 1).min(t - 1);
            prop_assert_eq!(zero_count, hi - lo + 1);
        }
    }

    #[test]
    fn every_variant_bias_has_reachable_rows(
        t in 1usize..=16,
        p in 1usize..=4,
        vi in 0usize..AttentionVariant::ALL.len(),
    ) {
        let v = AttentionVariant::ALL[vi];
        let biases = variant_biases(v, t, p);
        for row in biases.self_bias.data.rows() {
            prop_assert!(row.iter().any(|&x| !is_masked(x)));
        }
        if let Some(cb) = &biases.cross_bias {
            for row in cb.data.rows() {
                prop_assert!(row.iter().any(|&x| !is_masked(x)));
            }
        }
    }

    #[test]
    fn forward_noise_interpolates(seed in 0u64..1000, n in 1usize..=50) {
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = standard_normal(3, 6, &mut rng);
        let eps = standard_normal(3, 6, &mut rng);
        let xn = forward_noise(&x0, n, &eps, &s).unwrap();
        let ab = (1.0f64 - (1.0 - s.alpha_bars[n])).sqrt();
        let bb = (1.0 - s.alpha_bars[n]).sqrt();
        // coefficients lie on the unit circle: a^2 + b^2 = 1
        prop_assert!((ab * ab + bb * bb - 1.0).abs() < 1e-12);
        for ((y, &a), &e) in xn.iter().zip(x0.iter()).zip(eps.iter()) {
            prop_assert!((y - (a * ab + e * bb)).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_nonnegative_and_zero_iff_perfect(seed in 0u64..1000, t in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = standard_normal(t, 6, &mut rng);
        let xh = standard_normal(t, 6, &mut rng);
        prop_assert!(rec_loss(&x0, &xh).unwrap() >= 0.0);
        prop_assert!(vel_loss(&x0, &xh).unwrap() >= 0.0);
        prop_assert_eq!(total_loss(&x0, &x0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn motion_file_round_trip(t in 1usize..20, v in 3usize..10, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = standard_normal(t, v * 3, &mut rng);
        let seq = diffspeaker::data::MotionSequence::from_matrix(&m, 25);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dsmo");
        save_motion(&p, &seq).unwrap();
        let back = load_motion(&p).unwrap();
        prop_assert_eq!(back.offsets, seq.offsets);
        prop_assert_eq!(back.frames, t);
        prop_assert_eq!(back.vertex_count, v);
    }

    #[test]
    fn audio_file_round_trip(t in 1usize..20, d in 1usize..8) {
        let a = diffspeaker::data::AudioFeatureSequence {
            frames: t,
            feature_dim: d,
            fps: 25,
            features: (0..t * d).map(|i| i as f32 * 0.25).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dsau");
        save_audio(&p, &a).unwrap();
        let back = load_audio(&p).unwrap();
        prop_assert_eq!(back.features, a.features);
        prop_assert_eq!(back.feature_dim, d);
    }

    #[test]
    fn dataset_motion_dims_consistent(seed in 0u64..50) {
        let spec = SyntheticDatasetSpec {
            vertex_count: 6,
            sequence_count: 2,
            min_frames: 5,
            max_frames: 10,
            rng_seed: seed,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        for item in &ds.items {
            prop_assert_eq!(item.motion.vertex_count, 6);
            prop_assert_eq!(item.motion.frames, item.audio.frames);
            let m: Array2<f64> = item.motion.to_matrix();
            prop_assert!(m.iter().all(|x| x.is_finite()));
        }
    }
}
