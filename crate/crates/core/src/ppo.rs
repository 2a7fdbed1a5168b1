//! Rollout collection, generalized advantage estimation and the clipped PPO update.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{VecEnv, ACTION_DIM, OBS_DIM, PRIV_DIM};
use crate::error::{check_dim, Error, Result};
use crate::nn::{clip_global_norm, AdamConfig, AdamState};
use crate::pipeline::{ImaginedTransition, Wiring};
use crate::policy::{gaussian_entropy, Actor, Critic, ObservationHistory, PrivilegedHistory};
use crate::rng::SimRng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub num_envs: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Multiplies every reward before advantage estimation.
    pub reward_scale: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            num_envs: 128,
            horizon: 100,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coef: 1.0,
            entropy_coef: 0.0,
            lr: 3e-4,
            max_grad_norm: 1.0,
            reward_scale: 0.02,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo.{m}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be > 0");
        }
        if self.num_envs == 0 || self.horizon == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("num_envs, horizon, epochs and minibatches must be > 0");
        }
        if self.minibatches > self.num_envs * self.horizon {
            return bad("minibatches exceeds the batch size");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || !(self.reward_scale > 0.0) {
            return bad("lr, max_grad_norm and reward_scale must be > 0");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Time-major storage: record `t * num_envs + i` is env `i` at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub horizon: usize,
    pub actor_in: Array2<f64>,
    pub critic_in: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Discounted value of the truncated state, added to the reward on timeouts.
    pub bootstrap: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub failures: Vec<bool>,
    pub lin_scores: Vec<f64>,
    pub ang_scores: Vec<f64>,
    pub imagined: Vec<ImaginedTransition>,
    /// Action the plant received after clamping to `[-1/k, 1/k]`.
    pub applied: Array2<f64>,
    /// Observation produced by each step, before any automatic reset.
    pub next_obs: Array2<f64>,
    /// False where the episode ended or the command changed during the step.
    pub model_valid: Vec<bool>,
    /// Critic value of the state after the last step, per env.
    pub last_values: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn mean_lin_score(&self) -> f64 {
        self.lin_scores.iter().sum::<f64>() / self.len() as f64
    }

    pub fn mean_ang_score(&self) -> f64 {
        self.ang_scores.iter().sum::<f64>() / self.len() as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.len() as f64
    }
}

/// Vectorized environments plus the per-env observation histories.
#[derive(Debug, Clone)]
pub struct Collector {
    pub envs: VecEnv,
    pub obs_hist: Vec<ObservationHistory>,
    pub priv_hist: Vec<PrivilegedHistory>,
    pub rng: SimRng,
    pub k: f64,
}

impl Collector {
    pub fn new(envs: VecEnv, frames: usize, k: f64, rng: SimRng) -> Self {
        let obs_hist = envs
            .slots
            .iter()
            .map(|s| ObservationHistory::filled(s.obs.0, frames))
            .collect();
        let priv_hist = (0..envs.len())
            .map(|i| PrivilegedHistory::filled(envs.privileged(i).0, frames))
            .collect();
        Self {
            envs,
            obs_hist,
            priv_hist,
            rng,
            k,
        }
    }

    pub fn critic_batch(&self) -> Array2<f64> {
        let frames = self.priv_hist[0].len();
        let mut x = Array2::<f64>::zeros((self.priv_hist.len(), frames * PRIV_DIM));
        for (mut row, h) in x.axis_iter_mut(Axis(0)).zip(&self.priv_hist) {
            h.write_flat(row.as_slice_mut().unwrap());
        }
        x
    }
}

/// Runs `horizon` steps in every env with a stochastic policy.
pub fn collect_rollout(
    actor: &Actor,
    critic: &Critic,
    col: &mut Collector,
    horizon: usize,
    wiring: &Wiring,
    hyper: &PpoHyper,
) -> Result<RolloutBuffer> {
    let n = col.envs.len();
    let total = n * horizon;
    let mut buf = RolloutBuffer {
        num_envs: n,
        horizon,
        actor_in: Array2::zeros((total, actor.input_dim())),
        critic_in: Array2::zeros((total, critic.input_dim())),
        actions: Array2::zeros((total, ACTION_DIM)),
        log_probs: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        bootstrap: vec![0.0; total],
        values: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        failures: Vec::with_capacity(total),
        lin_scores: Vec::with_capacity(total),
        ang_scores: Vec::with_capacity(total),
        imagined: Vec::new(),
        applied: Array2::zeros((total, ACTION_DIM)),
        next_obs: Array2::zeros((total, OBS_DIM)),
        model_valid: Vec::with_capacity(total),
        last_values: Vec::new(),
    };
    let bound = 1.0 / col.k;
    let std: Vec<f64> = actor.log_std.iter().map(|l| l.exp()).collect();
    for t in 0..horizon {
        let (x, imagined) = wiring.actor_batch(&col.obs_hist)?;
        let cx = col.critic_batch();
        let mean = actor.forward_batch(x.view())?.mean().clone();
        let values = critic.values(cx.view())?;
        let base = t * n;
        buf.actor_in.slice_mut(ndarray::s![base..base + n, ..]).assign(&x);
        buf.critic_in.slice_mut(ndarray::s![base..base + n, ..]).assign(&cx);
        for i in 0..n {
            let mut raw = [0.0; ACTION_DIM];
            for j in 0..ACTION_DIM {
                let z: f64 = col.rng.sample(StandardNormal);
                raw[j] = mean[[i, j]] + std[j] * z;
            }
            let lp = crate::policy::gaussian_log_prob(
                mean.row(i).as_slice().unwrap(),
                &actor.log_std,
                &raw,
            );
            let applied = wiring.final_action(&raw, imagined.get(i));
            let res = col.envs.step_slot(i, &applied, col.k)?;
            let r = res.reward;
            if res.done && !res.failed {
                // time limit: bootstrap from the truncated state
                let mut h = col.priv_hist[i].clone();
                h.push(res.terminal_privileged.0);
                buf.bootstrap[base + i] = hyper.gamma * critic.evaluate(&h.flatten())?;
            }
            for j in 0..ACTION_DIM {
                buf.actions[[base + i, j]] = raw[j];
                buf.applied[[base + i, j]] = applied[j].clamp(-bound, bound);
            }
            for j in 0..OBS_DIM {
                buf.next_obs[[base + i, j]] = res.terminal_obs.0[j];
            }
            buf.log_probs.push(lp);
            buf.rewards.push(r.total);
            buf.values.push(values[i]);
            buf.dones.push(res.done);
            buf.failures.push(res.failed);
            buf.lin_scores.push(r.lin_tracking);
            buf.ang_scores.push(r.ang_tracking);
            let slot = &col.envs.slots[i];
            buf.model_valid.push(!res.done && !slot.command_changed);
            if res.reset {
                col.obs_hist[i].reset(slot.obs.0);
                col.priv_hist[i].reset(col.envs.privileged(i).0);
            } else {
                col.obs_hist[i].push(slot.obs.0);
                col.priv_hist[i].push(col.envs.privileged(i).0);
            }
        }
        buf.imagined.extend(imagined);
    }
    buf.last_values = critic.values(col.critic_batch().view())?;
    Ok(buf)
}

/// Single-sequence GAE. `bootstrap_value` is the value after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("gae values", rewards.len(), values.len())?;
    check_dim("gae dones", rewards.len(), dones.len())?;
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// GAE over a time-major `horizon x num_envs` layout, all envs at once.
pub fn compute_gae_batch(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    num_envs: usize,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("gae values", rewards.len(), values.len())?;
    check_dim("gae dones", rewards.len(), dones.len())?;
    check_dim("gae bootstrap", num_envs, last_values.len())?;
    if num_envs == 0 || rewards.len() % num_envs != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} records do not tile {num_envs} envs",
            rewards.len()
        )));
    }
    let horizon = rewards.len() / num_envs;
    let mut adv = vec![0.0; rewards.len()];
    let mut next_value = last_values.to_vec();
    let mut next_adv = vec![0.0; num_envs];
    for t in (0..horizon).rev() {
        let row = t * num_envs;
        for i in 0..num_envs {
            let k = row + i;
            let live = if dones[k] { 0.0 } else { 1.0 };
            let delta = rewards[k] + gamma * next_value[i] * live - values[k];
            next_adv[i] = delta + gamma * lambda * live * next_adv[i];
            adv[k] = next_adv[i];
            next_value[i] = values[k];
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)` and whether the unclipped
/// branch carries the gradient.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let un = ratio * adv;
    let cl = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if un <= cl {
        (un, true)
    } else {
        (cl, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Optimizer state for one actor-critic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub actor: AdamState,
    pub critic: AdamState,
}

impl Optimizers {
    pub fn new(actor: &Actor, critic: &Critic, cfg: AdamConfig) -> Self {
        Self {
            actor: AdamState::new(actor.num_params(), cfg),
            critic: AdamState::new(critic.net.num_params(), cfg),
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Clipped-surrogate PPO with value regression and an entropy bonus. On a
/// non-finite loss or gradient the networks and optimizers are restored and an
/// error is returned.
pub fn ppo_update<R: Rng + ?Sized>(
    actor: &mut Actor,
    critic: &mut Critic,
    opt: &mut Optimizers,
    buf: &RolloutBuffer,
    hyper: &PpoHyper,
    rng: &mut R,
) -> Result<PpoStats> {
    let scaled: Vec<f64> = buf
        .rewards
        .iter()
        .zip(&buf.bootstrap)
        .map(|(r, b)| r * hyper.reward_scale + b)
        .collect();
    let (mut adv, returns) = compute_gae_batch(
        &scaled,
        &buf.values,
        &buf.dones,
        &buf.last_values,
        buf.num_envs,
        hyper.gamma,
        hyper.lambda,
    )?;
    normalize(&mut adv);

    let snapshot = (actor.clone(), critic.clone(), opt.clone());
    let result = update_epochs(actor, critic, opt, buf, &adv, &returns, hyper, rng);
    if result.is_err() {
        (*actor, *critic, *opt) = snapshot;
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn update_epochs<R: Rng + ?Sized>(
    actor: &mut Actor,
    critic: &mut Critic,
    opt: &mut Optimizers,
    buf: &RolloutBuffer,
    adv: &[f64],
    returns: &[f64],
    hyper: &PpoHyper,
    rng: &mut R,
) -> Result<PpoStats> {
    let total = buf.len();
    let mb_size = total / hyper.minibatches;
    let mut idx: Vec<usize> = (0..total).collect();
    let mut stats = PpoStats::default();
    let mut count = 0.0;
    for _ in 0..hyper.epochs {
        idx.shuffle(rng);
        for mb in idx.chunks(mb_size).take(hyper.minibatches) {
            let x = buf.actor_in.select(Axis(0), mb);
            let cx = buf.critic_in.select(Axis(0), mb);
            let acts = buf.actions.select(Axis(0), mb);
            let m = mb.len() as f64;

            let cache = actor.forward_batch(x.view())?;
            let mean = cache.mean();
            let new_lp = actor.log_probs(mean, acts.view());
            let mut d_mean = Array2::<f64>::zeros(mean.raw_dim());
            let mut d_log_std = vec![0.0; ACTION_DIM];
            let (mut pl, mut kl, mut clipped) = (0.0, 0.0, 0.0);
            for (r, &k) in mb.iter().enumerate() {
                let ratio = (new_lp[r] - buf.log_probs[k]).exp();
                let (obj, active) = clipped_surrogate(ratio, adv[k], hyper.clip);
                pl -= obj / m;
                kl += (buf.log_probs[k] - new_lp[r]) / m;
                if !active {
                    clipped += 1.0 / m;
                    continue;
                }
                // d(-ratio * A)/d lp = -ratio * A
                let g = -ratio * adv[k] / m;
                for j in 0..ACTION_DIM {
                    let var = (2.0 * actor.log_std[j]).exp();
                    let diff = acts[[r, j]] - mean[[r, j]];
                    d_mean[[r, j]] += g * diff / var;
                    d_log_std[j] += g * (diff * diff / var - 1.0);
                }
            }
            let entropy = gaussian_entropy(&actor.log_std);
            d_log_std
                .iter_mut()
                .for_each(|d| *d -= hyper.entropy_coef);
            let (g_enc, g_head) = actor.backward_batch(&cache, d_mean.view())?;
            let (vl, mut g_critic) = critic.mse_loss_and_grad(cx.view(), &select(returns, mb))?;
            g_critic.iter_mut().for_each(|g| *g *= hyper.value_coef);

            let loss = pl + hyper.value_coef * vl - hyper.entropy_coef * entropy;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite PPO loss {loss}")));
            }
            let mut g_actor = [g_enc, g_head, d_log_std].concat();
            let norm = clip_global_norm(&mut [&mut g_actor, &mut g_critic], hyper.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Training("non-finite gradient norm".into()));
            }
            let mut p = actor.flat_params();
            opt.actor.step(&mut p, &g_actor)?;
            actor.set_flat_params(&p)?;
            opt.critic.step(critic.net.params_mut(), &g_critic)?;

            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += entropy;
            stats.approx_kl += kl;
            stats.clip_fraction += clipped;
            stats.grad_norm += norm;
            count += 1.0;
        }
    }
    let avg = |v: f64| v / count;
    Ok(PpoStats {
        policy_loss: avg(stats.policy_loss),
        value_loss: avg(stats.value_loss),
        entropy: avg(stats.entropy),
        approx_kl: avg(stats.approx_kl),
        clip_fraction: avg(stats.clip_fraction),
        grad_norm: avg(stats.grad_norm),
    })
}

fn select(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of A_t = sum_l (gamma lambda)^l delta_{t+l}, truncated at
    /// the first done.
    fn oracle(rewards: &[f64], values: &[f64], dones: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = rewards.len();
        let v_next = |t: usize| if t + 1 < n { values[t + 1] } else { boot };
        (0..n)
            .map(|t| {
                let mut a = 0.0;
                let mut w = 1.0;
                for s in t..n {
                    let live = if dones[s] { 0.0 } else { 1.0 };
                    a += w * (rewards[s] + g * v_next(s) * live - values[s]);
                    if dones[s] {
                        break;
                    }
                    w *= g * l;
                }
                a
            })
            .collect()
    }

    #[test]
    fn gae_gamma_zero_is_one_step() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 0.1, -1.0];
        let (a, ret) = compute_gae(&r, &v, &[false; 3], 9.0, 0.0, 0.95).unwrap();
        assert_eq!(a, vec![0.5, 1.9, 4.0]);
        assert_eq!(ret, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn gae_terminal_base_case() {
        let (a, _) = compute_gae(&[1.0], &[0.5], &[true], 100.0, 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.5]);
    }

    #[test]
    fn gae_length_three_matches_sum() {
        let r = [0.3, -0.2, 1.0];
        let v = [0.1, 0.4, -0.3];
        let d = [false, false, false];
        let (a, _) = compute_gae(&r, &v, &d, 0.7, 0.99, 0.95).unwrap();
        let o = oracle(&r, &v, &d, 0.7, 0.99, 0.95);
        for (x, y) in a.iter().zip(&o) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_length_mismatch_errors() {
        assert!(compute_gae(&[1.0, 2.0], &[0.0], &[false, false], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn batch_gae_matches_per_env() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, 0);
        let (n, h) = (3, 7);
        let r: Vec<f64> = (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n * h).map(|_| rng.random_bool(0.2)).collect();
        let last = [0.3, -0.2, 0.9];
        let (a, _) = compute_gae_batch(&r, &v, &d, &last, n, 0.99, 0.95).unwrap();
        for i in 0..n {
            let col = |x: &[f64]| (0..h).map(|t| x[t * n + i]).collect::<Vec<_>>();
            let dc: Vec<bool> = (0..h).map(|t| d[t * n + i]).collect();
            let o = oracle(&col(&r), &col(&v), &dc, last[i], 0.99, 0.95);
            for t in 0..h {
                assert!((a[t * n + i] - o[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn surrogate_clip_examples() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (1.2, false));
        let (v, active) = clipped_surrogate(0.5, -1.0, 0.2);
        assert!((v + 0.8).abs() < 1e-15 && !active);
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), (0.7, true));
    }

    #[test]
    fn clipped_never_exceeds_unclipped() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(5, 0);
        for _ in 0..1000 {
            let r = rng.random_range(0.0..3.0);
            let a = rng.random_range(-2.0..2.0);
            assert!(clipped_surrogate(r, a, 0.2).0 <= r * a + 1e-15);
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(PpoHyper::default().validate().is_ok());
        let bad = PpoHyper {
            gamma: 1.0,
            ..PpoHyper::default()
        };
        assert!(bad.validate().is_err());
        let bad = PpoHyper {
            clip: 0.0,
            ..PpoHyper::default()
        };
        assert!(bad.validate().is_err());
    }
}
