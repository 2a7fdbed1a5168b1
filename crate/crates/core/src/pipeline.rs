//! Two-stage training: an ideal policy and dynamics model in fixed dynamics,
//! then a robust policy under randomization fed with imagined transitions.

use std::fmt;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dynamics::{adjust, DynModel, SigmaStats, MODEL_IN};
use crate::env::{curriculum_update, EnvMode, ObservationFrame, VecEnv, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::eval::{fixed_dynamics_score, CurveProbe};
use crate::nn::{AdamConfig, AdamState};
use crate::policy::{Actor, ActorInput, Critic, ObservationHistory, REF_DIM};
use crate::ppo::{collect_rollout, ppo_update, Collector, Optimizers, RolloutBuffer};
use crate::rng::{derive_seed, stream_rng, RngSnapshot, SimRng};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LitConfig {
    /// Action scaling factor.
    pub k: f64,
    pub stage1_iterations: usize,
    /// Iterations always run before early stopping is considered, so the
    /// dynamics model and curriculum see enough data.
    pub stage1_min_iterations: usize,
    /// Fixed-dynamics evaluation score that ends Stage 1 early.
    pub stage1_target: f64,
    /// Below this score at the cap the reference is rejected.
    pub stage1_min_score: f64,
    pub stage1_eval_every: usize,
    /// Rollout score needed before a Stage-1 evaluation is attempted.
    pub stage1_eval_gate: f64,
    pub stage2_iterations: usize,
    /// Steps per env used to populate the sigma statistics after Stage 1.
    pub calibration_steps: usize,
    /// A rollout score below this fraction of the best so far flags a collapse.
    pub collapse_ratio: f64,
}

impl Default for LitConfig {
    fn default() -> Self {
        Self {
            k: 0.5,
            stage1_iterations: 1000,
            stage1_min_iterations: 150,
            stage1_target: 0.9,
            stage1_min_score: 0.6,
            stage1_eval_every: 10,
            stage1_eval_gate: 0.7,
            stage2_iterations: 300,
            calibration_steps: 200,
            collapse_ratio: 0.5,
        }
    }
}

impl LitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::Config("lit.k must lie in (0, 1]".into()));
        }
        if self.stage1_eval_every == 0 || self.calibration_steps == 0 {
            return Err(Error::Config(
                "lit.stage1_eval_every and lit.calibration_steps must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One of the six ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub tag: char,
    pub has_ref_inputs: bool,
    pub adjust_enabled: bool,
    pub residual_enabled: bool,
    pub zero_action_ref: bool,
    pub zero_state_ref: bool,
}

impl Variant {
    pub const TAGS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

    pub fn from_tag(tag: &str) -> Result<Self> {
        let t = tag.trim();
        let c = match t {
            "A" | "a" => 'A',
            "B" | "b" => 'B',
            "C" | "c" => 'C',
            "D" | "d" => 'D',
            "E" | "e" => 'E',
            "F" | "f" => 'F',
            _ => return Err(Error::UnknownVariant(tag.to_string())),
        };
        let on = Self {
            tag: c,
            has_ref_inputs: true,
            adjust_enabled: true,
            residual_enabled: false,
            zero_action_ref: false,
            zero_state_ref: false,
        };
        Ok(match c {
            'A' => Self {
                has_ref_inputs: false,
                adjust_enabled: false,
                ..on
            },
            'B' => Self {
                adjust_enabled: false,
                ..on
            },
            'C' => Self {
                residual_enabled: true,
                ..on
            },
            'D' => Self {
                zero_action_ref: true,
                ..on
            },
            'E' => Self {
                zero_state_ref: true,
                ..on
            },
            _ => on,
        })
    }

    pub fn needs_reference(&self) -> bool {
        self.has_ref_inputs
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag)
    }
}

/// `[o_t, a^r_t, o^r_{t+1}]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImaginedTransition {
    pub obs: ObservationFrame,
    pub action_ref: [f64; ACTION_DIM],
    pub obs_ref: [f64; OBS_DIM],
}

/// Frozen Stage-1 artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub ideal: Actor,
    pub model: DynModel,
    pub stats: SigmaStats,
}

/// Reference action from the ideal policy's mean, then the gated model prediction.
pub fn make_imagined_transition(
    ideal: &Actor,
    model: &DynModel,
    stats: &SigmaStats,
    history: &ObservationHistory,
) -> Result<ImaginedTransition> {
    if !stats.is_populated() {
        return Err(Error::UnpopulatedStats);
    }
    let obs = history.current();
    let action_ref = ideal.mean(&ActorInput::plain(history))?;
    let (mu, sigma) = model.predict(&obs, &action_ref)?;
    Ok(ImaginedTransition {
        obs,
        action_ref,
        obs_ref: adjust(&mu, &sigma, stats)?,
    })
}

/// Reference slots seen by the actor and the action sent to the plant.
pub fn variant_wiring(
    variant: &Variant,
    tr: &ImaginedTransition,
    actor_raw: &[f64; ACTION_DIM],
) -> (Option<[f64; ACTION_DIM]>, Option<[f64; OBS_DIM]>, [f64; ACTION_DIM]) {
    if !variant.has_ref_inputs {
        return (None, None, *actor_raw);
    }
    let a_ref = if variant.zero_action_ref {
        [0.0; ACTION_DIM]
    } else {
        tr.action_ref
    };
    let o_ref = if variant.zero_state_ref {
        [0.0; OBS_DIM]
    } else {
        tr.obs_ref
    };
    let action = if variant.residual_enabled {
        std::array::from_fn(|j| tr.action_ref[j] + actor_raw[j])
    } else {
        *actor_raw
    };
    (Some(a_ref), Some(o_ref), action)
}

/// A variant together with the frozen reference it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Wiring {
    pub variant: Variant,
    pub reference: Option<Reference>,
}

impl Wiring {
    pub fn new(variant: Variant, reference: Option<Reference>) -> Result<Self> {
        if variant.needs_reference() {
            match &reference {
                None => return Err(Error::MissingReference(variant.tag)),
                Some(r) if !r.stats.is_populated() => return Err(Error::UnpopulatedStats),
                _ => {}
            }
        }
        Ok(Self { variant, reference })
    }

    /// Plain history inputs, no reference.
    pub fn plain() -> Self {
        Self {
            variant: Variant::from_tag("A").expect("A is a valid tag"),
            reference: None,
        }
    }

    /// Imagined transitions for a batch of histories.
    pub fn imagine_batch(&self, hist: &[ObservationHistory]) -> Result<Vec<ImaginedTransition>> {
        let r = self
            .reference
            .as_ref()
            .ok_or(Error::MissingReference(self.variant.tag))?;
        let hd = hist[0].len() * OBS_DIM;
        let mut hx = Array2::<f64>::zeros((hist.len(), hd));
        for (mut row, h) in hx.axis_iter_mut(Axis(0)).zip(hist) {
            h.write_flat(row.as_slice_mut().unwrap());
        }
        let a_ref = r.ideal.forward_batch(hx.view())?.mean().clone();
        let mut mx = Array2::<f64>::zeros((hist.len(), MODEL_IN));
        mx.slice_mut(s![.., ..OBS_DIM]).assign(&hx.slice(s![.., ..OBS_DIM]));
        mx.slice_mut(s![.., OBS_DIM..]).assign(&a_ref);
        let (mu, sigma, _) = r.model.forward_batch(mx.view())?;
        let mut out = Vec::with_capacity(hist.len());
        for (i, h) in hist.iter().enumerate() {
            let m = mu.row(i);
            let obs_ref = if self.variant.adjust_enabled {
                adjust(m.as_slice().unwrap(), sigma.row(i).as_slice().unwrap(), &r.stats)?
            } else {
                std::array::from_fn(|j| m[j])
            };
            out.push(ImaginedTransition {
                obs: h.current(),
                action_ref: std::array::from_fn(|j| a_ref[[i, j]]),
                obs_ref,
            });
        }
        Ok(out)
    }

    /// Actor input rows for a batch of histories, plus the imagined transitions
    /// used (empty for variants without reference inputs).
    pub fn actor_batch(
        &self,
        hist: &[ObservationHistory],
    ) -> Result<(Array2<f64>, Vec<ImaginedTransition>)> {
        let hd = hist[0].len() * OBS_DIM;
        let refs = self.variant.has_ref_inputs;
        let width = hd + if refs { REF_DIM } else { 0 };
        let mut x = Array2::<f64>::zeros((hist.len(), width));
        for (mut row, h) in x.axis_iter_mut(Axis(0)).zip(hist) {
            h.write_flat(&mut row.as_slice_mut().unwrap()[..hd]);
        }
        if !refs {
            return Ok((x, Vec::new()));
        }
        let imagined = self.imagine_batch(hist)?;
        for (i, tr) in imagined.iter().enumerate() {
            let (a, o, _) = variant_wiring(&self.variant, tr, &[0.0; ACTION_DIM]);
            let mut row = x.row_mut(i);
            let dst = row.as_slice_mut().unwrap();
            dst[hd..hd + ACTION_DIM].copy_from_slice(&a.unwrap());
            dst[hd + ACTION_DIM..].copy_from_slice(&o.unwrap());
        }
        Ok((x, imagined))
    }

    pub fn final_action(
        &self,
        raw: &[f64; ACTION_DIM],
        tr: Option<&ImaginedTransition>,
    ) -> [f64; ACTION_DIM] {
        match tr {
            Some(tr) => variant_wiring(&self.variant, tr, raw).2,
            None => *raw,
        }
    }
}

/// One learning-curve row. Scores come from the run's [`CurveProbe`]; `level`
/// is the training curriculum level after the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub iter: usize,
    pub variant: char,
    pub seed: u64,
    pub lin_score: f64,
    pub ang_score: f64,
    pub level: u32,
}

#[derive(Debug, Clone)]
pub struct ReferenceOutcome {
    pub reference: Reference,
    pub critic: Critic,
    pub curves: Vec<CurveRow>,
    pub iterations: usize,
    /// Mean fixed-dynamics lin score of the final ideal policy.
    pub eval_score: f64,
    pub level: u32,
    pub rng: RngSnapshot,
}

/// Fits the dynamics model on the valid transitions of one rollout.
pub fn train_dynamics(
    model: &mut DynModel,
    opt: &mut AdamState,
    buf: &RolloutBuffer,
    epochs: usize,
    minibatches: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let rows: Vec<usize> = (0..buf.len()).filter(|&i| buf.model_valid[i]).collect();
    if rows.is_empty() || epochs == 0 {
        return Ok(0.0);
    }
    let mut x = Array2::<f64>::zeros((rows.len(), MODEL_IN));
    for (r, &i) in rows.iter().enumerate() {
        x.slice_mut(s![r, ..OBS_DIM])
            .assign(&buf.actor_in.slice(s![i, ..OBS_DIM]));
        x.slice_mut(s![r, OBS_DIM..]).assign(&buf.applied.row(i));
    }
    let y = buf.next_obs.select(Axis(0), &rows);
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    let mb = rows.len().div_ceil(minibatches);
    let mut last = 0.0;
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (loss, g) = model.nll_loss_and_grad(xb.view(), yb.view())?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite dynamics loss {loss}")));
            }
            let mut p = model.flat_params();
            opt.step(&mut p, &g.flatten())?;
            model.set_flat_params(&p)?;
            last = loss;
        }
    }
    Ok(last)
}

/// Sigma extremes of the model along deterministic ideal-policy rollouts in
/// fixed dynamics.
pub fn calibrate_sigma_stats(
    cfg: &RunConfig,
    ideal: &Actor,
    model: &DynModel,
    level: u32,
    seed: u64,
) -> Result<SigmaStats> {
    let mut envs = VecEnv::new(
        cfg.env.clone(),
        cfg.randomization.clone(),
        EnvMode::Fixed,
        cfg.ppo.num_envs,
        derive_seed(seed, "calibration-env"),
    )?;
    envs.set_level(level);
    let mut col = Collector::new(envs, ideal.frames, cfg.lit.k, stream_rng(seed, 0));
    let plain = Wiring::plain();
    let bound = 1.0 / cfg.lit.k;
    let mut stats = SigmaStats::default();
    for _ in 0..cfg.lit.calibration_steps {
        let (x, _) = plain.actor_batch(&col.obs_hist)?;
        let mean = ideal.forward_batch(x.view())?.mean().clone();
        let mut mx = Array2::<f64>::zeros((x.nrows(), MODEL_IN));
        mx.slice_mut(s![.., ..OBS_DIM]).assign(&x.slice(s![.., ..OBS_DIM]));
        mx.slice_mut(s![.., OBS_DIM..])
            .assign(&mean.mapv(|a| a.clamp(-bound, bound)));
        let (_, sigma, _) = model.forward_batch(mx.view())?;
        stats.update(sigma.view())?;
        for i in 0..col.envs.len() {
            let a = [mean[[i, 0]], mean[[i, 1]], mean[[i, 2]]];
            let res = col.envs.step_slot(i, &a, cfg.lit.k)?;
            let obs = col.envs.slots[i].obs.0;
            if res.reset {
                col.obs_hist[i].reset(obs);
            } else {
                col.obs_hist[i].push(obs);
            }
        }
    }
    Ok(stats)
}

/// Stage 1: PPO on the fixed plant with the dynamics model fit on the same
/// rollouts, followed by sigma calibration.
pub fn train_reference(
    cfg: &RunConfig,
    seed: u64,
    mut on_iter: impl FnMut(&CurveRow),
) -> Result<ReferenceOutcome> {
    cfg.validate()?;
    let mut init = stream_rng(derive_seed(seed, "stage1-init"), 0);
    let mut actor = Actor::new(&cfg.network, false, &mut init)?;
    let mut critic = Critic::new(&cfg.network, &mut init)?;
    let mut model = DynModel::new(&cfg.dynamics, &mut init)?;
    let mut opt = Optimizers::new(&actor, &critic, cfg.ppo.adam());
    let mut model_opt = AdamState::new(
        model.num_params(),
        AdamConfig {
            lr: cfg.dynamics.lr,
            ..AdamConfig::default()
        },
    );
    let envs = VecEnv::new(
        cfg.env.clone(),
        cfg.randomization.clone(),
        EnvMode::Fixed,
        cfg.ppo.num_envs,
        derive_seed(seed, "stage1-env"),
    )?;
    let mut col = Collector::new(
        envs,
        actor.frames,
        cfg.lit.k,
        stream_rng(derive_seed(seed, "stage1-act"), 0),
    );
    let mut update_rng = stream_rng(derive_seed(seed, "stage1-update"), 0);
    let wiring = Wiring::plain();
    let probe = CurveProbe::new(cfg, false, seed)?;
    let mut curves = Vec::new();
    let mut score = 0.0;
    let mut iterations = 0;
    for it in 0..cfg.lit.stage1_iterations {
        let buf = collect_rollout(&actor, &critic, &mut col, cfg.ppo.horizon, &wiring, &cfg.ppo)?;
        ppo_update(&mut actor, &mut critic, &mut opt, &buf, &cfg.ppo, &mut update_rng)?;
        train_dynamics(
            &mut model,
            &mut model_opt,
            &buf,
            cfg.dynamics.epochs,
            cfg.dynamics.minibatches,
            &mut update_rng,
        )?;
        let lin = buf.mean_lin_score();
        let level = curriculum_update(col.envs.level, lin, &cfg.env.curriculum);
        col.envs.set_level(level);
        let (curve_lin, curve_ang) = probe.scores(cfg, &actor, &wiring)?;
        let row = CurveRow {
            iter: it,
            variant: 'R',
            seed,
            lin_score: curve_lin,
            ang_score: curve_ang,
            level,
        };
        on_iter(&row);
        curves.push(row);
        iterations = it + 1;
        if it + 1 >= cfg.lit.stage1_min_iterations
            && lin >= cfg.lit.stage1_eval_gate
            && (it + 1) % cfg.lit.stage1_eval_every == 0
        {
            score = fixed_dynamics_score(cfg, &actor, derive_seed(seed, "stage1-eval"))?;
            if score >= cfg.lit.stage1_target {
                break;
            }
        }
    }
    if score < cfg.lit.stage1_target {
        score = fixed_dynamics_score(cfg, &actor, derive_seed(seed, "stage1-eval"))?;
    }
    if score < cfg.lit.stage1_min_score {
        return Err(Error::Training(format!(
            "ideal policy reached lin score {score:.3} after {iterations} iterations \
             (minimum {}); reference unusable",
            cfg.lit.stage1_min_score
        )));
    }
    let level = col.envs.level;
    let stats = calibrate_sigma_stats(cfg, &actor, &model, level, derive_seed(seed, "calibration"))?;
    Ok(ReferenceOutcome {
        reference: Reference {
            ideal: actor,
            model,
            stats,
        },
        critic,
        curves,
        iterations,
        eval_score: score,
        level,
        rng: RngSnapshot::capture(&update_rng),
    })
}

#[derive(Debug, Clone)]
pub struct RobustOutcome {
    pub actor: Actor,
    pub critic: Critic,
    pub wiring: Wiring,
    pub curves: Vec<CurveRow>,
    /// Reason the run was flagged: a non-finite update or a score collapse.
    pub diverged: Option<String>,
    pub level: u32,
    pub rng: RngSnapshot,
}

/// Stage 2: PPO under full randomization with the variant's reference wiring.
pub fn train_robust(
    cfg: &RunConfig,
    reference: Option<&Reference>,
    variant: Variant,
    seed: u64,
    mut on_iter: impl FnMut(&CurveRow),
) -> Result<RobustOutcome> {
    cfg.validate()?;
    let wiring = Wiring::new(
        variant,
        if variant.needs_reference() {
            reference.cloned()
        } else {
            None
        },
    )?;
    let label = |s: &str| derive_seed(seed, &format!("stage2-{s}"));
    let mut init = stream_rng(label("init"), 0);
    let mut actor = Actor::new(&cfg.network, variant.has_ref_inputs, &mut init)?;
    let mut critic = Critic::new(&cfg.network, &mut init)?;
    let mut opt = Optimizers::new(&actor, &critic, cfg.ppo.adam());
    let envs = VecEnv::new(
        cfg.env.clone(),
        cfg.randomization.clone(),
        EnvMode::Randomized,
        cfg.ppo.num_envs,
        label("env"),
    )?;
    let mut col = Collector::new(envs, actor.frames, cfg.lit.k, stream_rng(label("act"), 0));
    let mut update_rng = stream_rng(label("update"), 0);
    let probe = CurveProbe::new(cfg, true, seed)?;
    let mut curves = Vec::new();
    let mut diverged = None;
    let mut best: f64 = 0.0;
    for it in 0..cfg.lit.stage2_iterations {
        let buf = collect_rollout(&actor, &critic, &mut col, cfg.ppo.horizon, &wiring, &cfg.ppo)?;
        if let Err(e) = ppo_update(&mut actor, &mut critic, &mut opt, &buf, &cfg.ppo, &mut update_rng) {
            match e {
                Error::Training(msg) | Error::NonFinite(msg) => {
                    diverged = Some(format!("iteration {it}: {msg}"));
                    break;
                }
                other => return Err(other),
            }
        }
        let lin = buf.mean_lin_score();
        best = best.max(lin);
        if diverged.is_none() && best > 0.5 && lin < cfg.lit.collapse_ratio * best {
            diverged = Some(format!(
                "iteration {it}: lin score collapsed to {lin:.3} (best {best:.3})"
            ));
        }
        let level = curriculum_update(col.envs.level, lin, &cfg.env.curriculum);
        col.envs.set_level(level);
        let (curve_lin, curve_ang) = probe.scores(cfg, &actor, &wiring)?;
        let row = CurveRow {
            iter: it,
            variant: variant.tag,
            seed,
            lin_score: curve_lin,
            ang_score: curve_ang,
            level,
        };
        on_iter(&row);
        curves.push(row);
    }
    Ok(RobustOutcome {
        actor,
        critic,
        wiring,
        curves,
        diverged,
        level: col.envs.level,
        rng: RngSnapshot::capture(&update_rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynModelConfig;
    use crate::policy::NetworkConfig;

    fn reference(seed: u64) -> Reference {
        let mut rng = stream_rng(seed, 0);
        let ideal = Actor::new(&NetworkConfig::default(), false, &mut rng).unwrap();
        let model = DynModel::new(&DynModelConfig::default(), &mut rng).unwrap();
        let stats = SigmaStats {
            min: [1e-3; OBS_DIM],
            max: [2.0; OBS_DIM],
            count: 10,
        };
        Reference { ideal, model, stats }
    }

    fn history(seed: u64) -> ObservationHistory {
        use rand::Rng;
        let mut rng = stream_rng(seed, 1);
        let mut h = ObservationHistory::filled([0.0; OBS_DIM], 6);
        for _ in 0..6 {
            h.push(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        }
        h
    }

    fn tr() -> ImaginedTransition {
        ImaginedTransition {
            obs: ObservationFrame([0.5; OBS_DIM]),
            action_ref: [0.1, 0.0, 0.0],
            obs_ref: [0.3; OBS_DIM],
        }
    }

    #[test]
    fn variant_table() {
        let v: Vec<Variant> = Variant::TAGS
            .iter()
            .map(|t| Variant::from_tag(&t.to_string()).unwrap())
            .collect();
        assert!(!v[0].has_ref_inputs);
        assert!(v[1].has_ref_inputs && !v[1].adjust_enabled);
        assert!(v[2].residual_enabled);
        assert!(v[3].zero_action_ref && !v[3].zero_state_ref);
        assert!(v[4].zero_state_ref && !v[4].zero_action_ref);
        let f = v[5];
        assert!(f.has_ref_inputs && f.adjust_enabled && !f.residual_enabled);
        assert!(!f.zero_action_ref && !f.zero_state_ref);
        assert!(matches!(Variant::from_tag("G"), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn wiring_examples() {
        let d = Variant::from_tag("D").unwrap();
        let (a, o, _) = variant_wiring(&d, &tr(), &[0.2, 0.0, 0.0]);
        assert_eq!(a, Some([0.0; 3]));
        assert_eq!(o, Some([0.3; OBS_DIM]));
        let e = Variant::from_tag("E").unwrap();
        assert_eq!(variant_wiring(&e, &tr(), &[0.0; 3]).1, Some([0.0; OBS_DIM]));
        let c = Variant::from_tag("C").unwrap();
        let act = variant_wiring(&c, &tr(), &[0.2, 0.0, 0.0]).2;
        assert!((act[0] - 0.3).abs() < 1e-15 && act[1] == 0.0 && act[2] == 0.0);
        let f = Variant::from_tag("F").unwrap();
        assert_eq!(variant_wiring(&f, &tr(), &[0.2, -0.4, 0.1]).2, [0.2, -0.4, 0.1]);
        let a = Variant::from_tag("A").unwrap();
        assert_eq!(variant_wiring(&a, &tr(), &[0.2, 0.0, 0.0]).0, None);
    }

    #[test]
    fn imagined_transition_matches_manual_chain() {
        let r = reference(3);
        let h = history(4);
        let t = make_imagined_transition(&r.ideal, &r.model, &r.stats, &h).unwrap();
        let a = r.ideal.act(&ActorInput::plain(&h), true, &mut stream_rng(0, 0)).unwrap().mean;
        let (mu, sigma) = r.model.predict(&h.current(), &a).unwrap();
        assert_eq!(t.action_ref, a);
        assert_eq!(t.obs_ref, adjust(&mu, &sigma, &r.stats).unwrap());
        assert_eq!(t, make_imagined_transition(&r.ideal, &r.model, &r.stats, &h).unwrap());
    }

    #[test]
    fn saturated_sigma_zeroes_reference() {
        let mut r = reference(3);
        r.stats.max = [1e-9; OBS_DIM];
        r.stats.min = [1e-10; OBS_DIM];
        let t = make_imagined_transition(&r.ideal, &r.model, &r.stats, &history(5)).unwrap();
        assert_eq!(t.obs_ref, [0.0; OBS_DIM]);
    }

    #[test]
    fn batch_imagination_matches_single() {
        let r = reference(6);
        let w = Wiring::new(Variant::from_tag("F").unwrap(), Some(r.clone())).unwrap();
        let hs: Vec<_> = (0..4).map(history).collect();
        let batch = w.imagine_batch(&hs).unwrap();
        for (h, b) in hs.iter().zip(&batch) {
            let s = make_imagined_transition(&r.ideal, &r.model, &r.stats, h).unwrap();
            for j in 0..ACTION_DIM {
                assert!((s.action_ref[j] - b.action_ref[j]).abs() < 1e-12);
            }
            for j in 0..OBS_DIM {
                assert!((s.obs_ref[j] - b.obs_ref[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wiring_requires_reference() {
        for t in ["B", "C", "D", "E", "F"] {
            let v = Variant::from_tag(t).unwrap();
            assert!(matches!(Wiring::new(v, None), Err(Error::MissingReference(_))));
        }
        assert!(Wiring::new(Variant::from_tag("A").unwrap(), None).is_ok());
        let mut r = reference(1);
        r.stats = SigmaStats::default();
        assert!(matches!(
            Wiring::new(Variant::from_tag("F").unwrap(), Some(r)),
            Err(Error::UnpopulatedStats)
        ));
    }

    #[test]
    fn actor_batch_layout() {
        let r = reference(2);
        let hs: Vec<_> = (0..3).map(history).collect();
        let a = Wiring::plain().actor_batch(&hs).unwrap();
        assert_eq!(a.0.ncols(), 54);
        assert!(a.1.is_empty());
        let d = Wiring::new(Variant::from_tag("D").unwrap(), Some(r)).unwrap();
        let (x, im) = d.actor_batch(&hs).unwrap();
        assert_eq!(x.ncols(), 66);
        for i in 0..3 {
            assert_eq!(x.slice(s![i, 54..57]).to_vec(), vec![0.0; 3]);
            assert_eq!(x.slice(s![i, 57..]).to_vec(), im[i].obs_ref.to_vec());
            assert_eq!(x.slice(s![i, ..54]).to_vec(), hs[i].flatten());
        }
    }
}
