//! The robust actor must see hidden dynamics only through observations.

mod common;

use reftrack::env::{sample_dynamics, DynamicsParams, NoiseConfig, PlanarEnv};
use reftrack::pipeline::{train_reference, Variant, Wiring};
use reftrack::policy::ObservationHistory;
use reftrack::rng::stream_rng;

#[test]
fn actor_inputs_depend_on_observations_only() {
    let cfg = common::tiny();
    let reference = train_reference(&cfg, 1, |_| {}).unwrap().reference;
    let frames = reference.ideal.frames;
    let env = PlanarEnv::new(cfg.env.clone(), NoiseConfig::off());

    let nominal = DynamicsParams::nominal(&cfg.env);
    let mut heavy = sample_dynamics(&cfg.randomization, &cfg.env, &mut stream_rng(9, 0), false).unwrap();
    heavy.payload = 3.0;
    heavy.ext_force = [2.0, -1.0];
    // Bias and delay are observable by design; keep them equal here.
    heavy.sensor_bias = nominal.sensor_bias;
    heavy.delay = 0;
    assert_ne!(nominal, heavy);

    // Same reset stream: the plants differ but the first observations agree.
    let (mut s1, o1) = env.reset(nominal, 0, &mut stream_rng(4, 0));
    let (mut s2, o2) = env.reset(heavy, 0, &mut stream_rng(4, 0));
    assert_eq!(o1, o2);

    for tag in Variant::TAGS {
        let v = Variant::from_tag(&tag.to_string()).unwrap();
        let w = Wiring::new(v, Some(reference.clone())).unwrap();
        let h1 = vec![ObservationHistory::filled(o1.0, frames)];
        let h2 = vec![ObservationHistory::filled(o2.0, frames)];
        assert_eq!(w.actor_batch(&h1).unwrap(), w.actor_batch(&h2).unwrap(), "variant {tag}");
    }

    // The hidden difference reaches the policy through the next observation.
    let a = [0.5, 0.0, 0.0];
    let r1 = env.step(&mut s1, &a, cfg.lit.k, &mut stream_rng(5, 0));
    let r2 = env.step(&mut s2, &a, cfg.lit.k, &mut stream_rng(5, 0));
    assert_ne!(r1.obs, r2.obs);
}
