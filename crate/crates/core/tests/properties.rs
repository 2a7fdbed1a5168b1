use proptest::prelude::*;

use reftrack::checkpoint::{Checkpoint, Block};
use reftrack::dynamics::{adjust, pearson, Correlation, SigmaStats};
use reftrack::policy::scale_action;
use reftrack::ppo::{compute_gae, compute_gae_batch};
use reftrack::rng::{stream_rng, RngSnapshot};

fn stats_from(lo: [f64; 9], width: [f64; 9]) -> SigmaStats {
    SigmaStats {
        min: lo,
        max: std::array::from_fn(|j| lo[j] + width[j]),
        count: 1,
    }
}

proptest! {
    #[test]
    fn adjust_stays_between_zero_and_mu(
        mu in prop::array::uniform9(-10.0..10.0f64),
        sigma in prop::array::uniform9(1e-4..3.0f64),
        lo in prop::array::uniform9(1e-4..1.0f64),
        width in prop::array::uniform9(0.0..1.0f64),
    ) {
        let st = stats_from(lo, width);
        let out = adjust(&mu, &sigma, &st).unwrap();
        for j in 0..9 {
            // out = w * mu with w in [0, 1].
            prop_assert!(out[j].abs() <= mu[j].abs());
            prop_assert!(out[j] == 0.0 || out[j].signum() == mu[j].signum());
        }
    }

    #[test]
    fn scaled_actions_are_bounded(a in prop::array::uniform3(-1e3..1e3f64), k in 0.01..1.0f64) {
        for v in scale_action(&a, k, &[0.0; 3]) {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-5.0..5.0f64, 3..40),
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64).collect();
        let xt: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        match (pearson(&xs, &ys).unwrap(), pearson(&xt, &ys).unwrap()) {
            (Correlation::Value(a), Correlation::Value(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn gae_batch_equals_per_env(
        t in 1usize..12,
        n in 1usize..5,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0);
        let len = t * n;
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.2)).collect();
        let last: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (adv, ret) = compute_gae_batch(&r, &v, &d, &last, n, 0.97, 0.9).unwrap();
        for i in 0..n {
            let col = |x: &[f64]| (0..t).map(|s| x[s * n + i]).collect::<Vec<_>>();
            let dc: Vec<bool> = (0..t).map(|s| d[s * n + i]).collect();
            let (a1, r1) = compute_gae(&col(&r), &col(&v), &dc, last[i], 0.97, 0.9).unwrap();
            prop_assert_eq!(a1, col(&adv));
            prop_assert_eq!(r1, col(&ret));
        }
    }

    #[test]
    fn checkpoint_bytes_roundtrip(
        iteration in any::<u64>(),
        stream in any::<u64>(),
        data in prop::collection::vec(prop::num::f64::ANY, 0..50),
        key in "[a-z]{1,8}",
        value in "[ -~]{0,20}",
    ) {
        let mut ck = Checkpoint::new("fp", "robust");
        ck.iteration = iteration;
        ck.rng = Some(RngSnapshot::capture(&stream_rng(iteration, stream)));
        ck.set_meta(&key, &value);
        ck.blocks.push(Block { name: "x".into(), shape: vec![data.len()], data: data.clone() });
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let bits = |b: &Block| b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.blocks[0]), bits(&ck.blocks[0]));
        prop_assert_eq!(back.rng, ck.rng);
        prop_assert_eq!(back.iteration, iteration);
        prop_assert_eq!(back.meta.get(&key), Some(&value));
    }
}
