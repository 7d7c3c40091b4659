use ogreg_core::config::{KeyValues, TrainConfig};
use ogreg_core::numerics::{ogt, ops};
use ogreg_core::synthdata::{gen_order_task, resample_frames};
use ogreg_core::{Direction, Rng, Tensor};
use proptest::prelude::*;

fn tensor(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
    Rng::new(seed).normal_tensor(&dims, 2.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ogt_round_trips(dims in prop::collection::vec(1usize..5, 0..=5), seed in any::<u64>()) {
        let t = tensor(dims, seed);
        let back: Tensor<f64> = ogt::decode(&ogt::encode(&t)).unwrap();
        prop_assert_eq!(&back, &t);
        let narrow: Tensor<f32> = t.cast();
        prop_assert_eq!(ogt::decode::<f32>(&ogt::encode(&narrow)).unwrap(), narrow);
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..8, cols in 1usize..12, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let x = Rng::new(seed).normal_tensor::<f64>(&[rows, cols], scale).unwrap();
        let s = ops::softmax_last(&x).unwrap();
        for r in s.elems().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn spatial_pool_inverts_replication(t in 1usize..4, hw in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
        let x = tensor(vec![1, t, hw, hw, 2], seed);
        let up = ops::resample_spatial(&x, r, Direction::Up).unwrap();
        let down = ops::resample_spatial(&up, r, Direction::Down).unwrap();
        prop_assert!(down.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn adaptive_pool_preserves_means(h in 1usize..10, w in 1usize..10, oh in 1usize..6, seed in any::<u64>()) {
        let x = Rng::new(seed).uniform_tensor::<f64>(&[h, w], 0.0, 1.0).unwrap();
        let same = ops::adaptive_pool2d(&x, h, w).unwrap();
        prop_assert_eq!(&same, &x);
        let p = ops::adaptive_pool2d(&x, oh, oh).unwrap();
        let (lo, hi) = x.elems().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(p.elems().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn resample_frames_keeps_labels(frames in 1usize..40, seed in any::<u64>()) {
        let data = gen_order_task(1, 8, 16, 16, &Rng::new(seed)).unwrap();
        for s in &data {
            let r = resample_frames(s, frames).unwrap();
            prop_assert_eq!(r.num_frames(), frames);
            prop_assert_eq!(r.label, s.label);
            prop_assert_eq!(r.frame(0), s.frame(0));
        }
    }

    #[test]
    fn train_config_text_round_trips(lr in 1e-6f64..1.0, epochs in 2usize..50, seed in any::<u64>(), wd in 0.0f64..0.5) {
        let c = TrainConfig { base_lr: lr, epochs, warmup_epochs: 1, seed, weight_decay: wd, ..TrainConfig::default() };
        let back = TrainConfig::from_kv(&KeyValues::parse(&c.to_text()).unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}
