#![allow(dead_code)]

use reftrack::config::RunConfig;

/// A configuration small enough to train and evaluate in seconds.
pub const TINY_TOML: &str = r#"
seed = 3
[ppo]
num_envs = 8
horizon = 16
epochs = 1
minibatches = 2
[lit]
stage1_iterations = 3
stage1_min_iterations = 2
stage1_min_score = 0.0
stage1_eval_every = 2
stage2_iterations = 2
calibration_steps = 10
[eval]
episodes = 4
episode_steps = 20
trial_steps = 40
payload_grid = [0.5, 2.0]
payload_trials = 3
push_samples = 6
push_window = [10, 20]
correlation_onset = 20
correlation_steps = 40
curve_episodes = 2
curve_steps = 20
ablation_variants = "AF"
ablation_seeds = [1, 2]
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY_TOML).expect("tiny config parses")
}
