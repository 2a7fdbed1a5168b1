//! Evaluation harness: tracking tables, payload and push sweeps, the sigma/error
//! correlation probe and the variant ablation matrix.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dynamics::{pearson, sigma_error_probe, Correlation, ProbeSeries, ProbeStep};
use crate::env::{
    sample_dynamics, tracking_score, DynamicsParams, EnvConfig, EnvState, NoiseConfig,
    ObservationFrame, PlanarEnv, ACTION_DIM,
};
use crate::error::{Error, Result};
use crate::pipeline::{train_reference, train_robust, CurveRow, Reference, Variant, Wiring};
use crate::policy::{Actor, ObservationHistory};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub episode_steps: u32,
    /// Half-range of the linear command in evaluation episodes (m/s).
    pub lin_command: f64,
    /// Half-range of the yaw command in evaluation episodes (rad/s).
    pub yaw_command: f64,
    pub walk_command: [f64; 3],
    pub trial_steps: u32,
    /// Payload masses (kg) swept beyond the training range.
    pub payload_grid: Vec<f64>,
    pub payload_trials: usize,
    pub push_samples: usize,
    pub push_range: f64,
    /// Inclusive step window in which the single push lands.
    pub push_window: [u32; 2],
    /// Interior bin edges on push magnitude (m/s).
    pub push_bins: Vec<f64>,
    pub correlation_onset: u32,
    pub correlation_steps: u32,
    /// World-frame force switched on at the onset step (N).
    pub correlation_force: [f64; 2],
    pub correlation_command: [f64; 3],
    pub ablation_variants: String,
    pub ablation_seeds: Vec<u64>,
    /// Deterministic episodes behind each learning-curve point.
    pub curve_episodes: usize,
    pub curve_steps: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            episode_steps: 500,
            lin_command: 1.0,
            yaw_command: 1.0,
            walk_command: [1.0, 0.0, 0.0],
            trial_steps: 200,
            payload_grid: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            payload_trials: 100,
            push_samples: 2000,
            push_range: 3.0,
            push_window: [100, 150],
            push_bins: vec![1.0, 2.0],
            correlation_onset: 200,
            correlation_steps: 400,
            correlation_force: [0.0, 15.0],
            correlation_command: [1.0, 0.0, 0.0],
            ablation_variants: "ABCDEF".into(),
            ablation_seeds: vec![1, 2, 3, 4, 5],
            curve_episodes: 32,
            curve_steps: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("eval.{m}")));
        if self.episodes == 0 || self.episode_steps == 0 || self.trial_steps == 0 {
            return bad("episodes, episode_steps and trial_steps must be > 0");
        }
        if self.curve_episodes == 0 || self.curve_steps == 0 {
            return bad("curve_episodes and curve_steps must be > 0");
        }
        if self.push_window[0] > self.push_window[1] || self.push_window[1] >= self.trial_steps {
            return bad("push_window must be ordered and end before trial_steps");
        }
        if self.push_bins.windows(2).any(|w| w[0] >= w[1]) || self.push_bins.iter().any(|b| *b <= 0.0) {
            return bad("push_bins must be positive and increasing");
        }
        if self.correlation_onset >= self.correlation_steps {
            return bad("correlation_onset must precede correlation_steps");
        }
        if !(self.push_range >= 0.0) || !(self.lin_command >= 0.0) || !(self.yaw_command >= 0.0) {
            return bad("ranges must be >= 0");
        }
        for c in self.ablation_variants.chars() {
            Variant::from_tag(&c.to_string())?;
        }
        Ok(())
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.ablation_variants
            .chars()
            .map(|c| Variant::from_tag(&c.to_string()))
            .collect()
    }
}

/// Mean squared linear and yaw-rate tracking errors. Rows are `(vx, vy, wz)`
/// in the body frame and `(vx*, vy*, wz*)`.
pub fn tracking_error(trajectory: &[[f64; 3]], commands: &[[f64; 3]]) -> Result<(f64, f64)> {
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    crate::error::check_dim("tracking commands", trajectory.len(), commands.len())?;
    let n = trajectory.len() as f64;
    let (mut lin, mut ang) = (0.0, 0.0);
    for (v, c) in trajectory.iter().zip(commands) {
        lin += (v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2);
        ang += (v[2] - c[2]).powi(2);
    }
    Ok((lin / n, ang / n))
}

/// One evaluation episode specification.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: DynamicsParams,
    pub command: [f64; 3],
    pub steps: u32,
    /// Step index and world-frame velocity change of a single push.
    pub push: Option<(u32, [f64; 2])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub payload: f64,
    pub push: [f64; 2],
    pub push_step: u32,
    pub survived: bool,
    pub steps: u32,
    /// Body-frame `(vx, vy, wz)` after each step.
    pub velocity: Vec<[f64; 3]>,
    pub commands: Vec<[f64; 3]>,
}

impl TrialRecord {
    pub fn errors(&self) -> (f64, f64) {
        tracking_error(&self.velocity, &self.commands).unwrap_or((f64::NAN, f64::NAN))
    }

    pub fn lin_score(&self, sigma: f64) -> f64 {
        let n = self.velocity.len() as f64;
        self.velocity
            .iter()
            .zip(&self.commands)
            .map(|(v, c)| tracking_score((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2), sigma))
            .sum::<f64>()
            / n
    }

    pub fn ang_score(&self, sigma: f64) -> f64 {
        let n = self.velocity.len() as f64;
        self.velocity
            .iter()
            .zip(&self.commands)
            .map(|(v, c)| tracking_score((v[2] - c[2]).powi(2), sigma))
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub lin_error: f64,
    pub ang_error: f64,
    pub success_rate: f64,
    pub n_trials: usize,
}

impl MetricsRow {
    pub fn from_trials(scenario: impl Into<String>, trials: &[TrialRecord]) -> Self {
        let n = trials.len().max(1) as f64;
        let (mut lin, mut ang) = (0.0, 0.0);
        for t in trials {
            let (l, a) = t.errors();
            lin += l;
            ang += a;
        }
        Self {
            scenario: scenario.into(),
            lin_error: lin / n,
            ang_error: ang / n,
            success_rate: success_rate(trials),
            n_trials: trials.len(),
        }
    }
}

pub fn success_rate(trials: &[TrialRecord]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    trials.iter().filter(|t| t.survived).count() as f64 / trials.len() as f64
}

/// Runs every scenario with the deterministic policy, all episodes batched.
pub fn run_trials(
    actor: &Actor,
    wiring: &Wiring,
    env_cfg: &EnvConfig,
    noise: &NoiseConfig,
    k: f64,
    scenarios: &[Scenario],
    seed: u64,
) -> Result<Vec<TrialRecord>> {
    if scenarios.is_empty() {
        return Ok(Vec::new());
    }
    let mut cfg = env_cfg.clone();
    cfg.episode_steps = scenarios.iter().map(|s| s.steps).max().unwrap_or(1);
    let mut env = PlanarEnv::new(cfg, noise.clone());
    env.resample_commands = false;

    let mut rngs: Vec<_> = (0..scenarios.len()).map(|i| stream_rng(seed, i as u64)).collect();
    let mut states: Vec<EnvState> = Vec::with_capacity(scenarios.len());
    let mut hist: Vec<ObservationHistory> = Vec::with_capacity(scenarios.len());
    for (sc, rng) in scenarios.iter().zip(rngs.iter_mut()) {
        let (mut st, mut obs) = env.reset(sc.params.clone(), 0, rng);
        st.command = sc.command;
        obs.0[..3].copy_from_slice(&sc.command);
        hist.push(ObservationHistory::filled(obs.0, actor.frames));
        states.push(st);
    }
    let mut records: Vec<TrialRecord> = scenarios
        .iter()
        .map(|sc| TrialRecord {
            payload: sc.params.payload,
            push: sc.push.map_or([0.0; 2], |p| p.1),
            push_step: sc.push.map_or(0, |p| p.0),
            survived: true,
            steps: 0,
            velocity: Vec::with_capacity(sc.steps as usize),
            commands: Vec::with_capacity(sc.steps as usize),
        })
        .collect();
    let mut active: Vec<bool> = vec![true; scenarios.len()];
    while active.iter().any(|a| *a) {
        let (x, imagined) = wiring.actor_batch(&hist)?;
        let mean = actor.forward_batch(x.view())?.mean().clone();
        for i in 0..scenarios.len() {
            if !active[i] {
                continue;
            }
            let raw = [mean[[i, 0]], mean[[i, 1]], mean[[i, 2]]];
            let a = wiring.final_action(&raw, imagined.get(i));
            let st = &mut states[i];
            let (_, done, failed) = env.advance(st, &a, k, &mut rngs[i]);
            let sc = &scenarios[i];
            if !done {
                if let Some((step, dv)) = sc.push {
                    if st.step == step {
                        st.velocity[0] += dv[0];
                        st.velocity[1] += dv[1];
                        st.refresh_sensor();
                    }
                }
            }
            let v = st.body_velocity();
            let rec = &mut records[i];
            rec.velocity.push([v[0], v[1], st.yaw_rate]);
            rec.commands.push(sc.command);
            rec.steps = st.step;
            let obs = env.observe(st, &mut rngs[i]);
            if failed || !obs.0.iter().all(|x| x.is_finite()) {
                rec.survived = false;
                active[i] = false;
            } else if st.step >= sc.steps || done {
                active[i] = false;
            } else {
                hist[i].push(obs.0);
            }
        }
    }
    Ok(records)
}

fn uniform_command<R: Rng + ?Sized>(cfg: &EvalConfig, rng: &mut R) -> [f64; 3] {
    let mut u = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    [u(cfg.lin_command), u(cfg.lin_command), u(cfg.yaw_command)]
}

/// The fixed episode set behind every learning-curve point of one run. Reusing
/// it keeps curve values comparable across iterations and across variants,
/// independent of the curriculum level the rollouts happen to be at.
#[derive(Debug, Clone)]
pub struct CurveProbe {
    scenarios: Vec<Scenario>,
    noise: NoiseConfig,
    seed: u64,
}

impl CurveProbe {
    /// Nominal noiseless plant when `randomized` is false, else the training
    /// randomization with sensor noise.
    pub fn new(cfg: &RunConfig, randomized: bool, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(derive_seed(seed, "curve"), 0);
        let mut scenarios = Vec::with_capacity(cfg.eval.curve_episodes);
        for _ in 0..cfg.eval.curve_episodes {
            let params = if randomized {
                sample_dynamics(&cfg.randomization, &cfg.env, &mut rng, false)?
            } else {
                DynamicsParams::nominal(&cfg.env)
            };
            scenarios.push(Scenario {
                params,
                command: uniform_command(&cfg.eval, &mut rng),
                steps: cfg.eval.curve_steps,
                push: None,
            });
        }
        let noise = if randomized {
            cfg.randomization.noise.clone()
        } else {
            NoiseConfig::off()
        };
        Ok(Self {
            scenarios,
            noise,
            seed: derive_seed(seed, "curve-episodes"),
        })
    }

    /// Mean normalized (lin, ang) tracking scores of the deterministic policy.
    pub fn scores(&self, cfg: &RunConfig, actor: &Actor, wiring: &Wiring) -> Result<(f64, f64)> {
        let trials = run_trials(actor, wiring, &cfg.env, &self.noise, cfg.lit.k, &self.scenarios, self.seed)?;
        let sigma = cfg.env.reward.tracking_sigma;
        let n = trials.len() as f64;
        Ok((
            trials.iter().map(|t| t.lin_score(sigma)).sum::<f64>() / n,
            trials.iter().map(|t| t.ang_score(sigma)).sum::<f64>() / n,
        ))
    }
}

/// Mean normalized lin score of the plain policy over nominal-dynamics episodes.
pub fn fixed_dynamics_score(cfg: &RunConfig, actor: &Actor, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 0);
    let scenarios: Vec<Scenario> = (0..cfg.eval.episodes)
        .map(|_| Scenario {
            params: DynamicsParams::nominal(&cfg.env),
            command: uniform_command(&cfg.eval, &mut rng),
            steps: cfg.eval.episode_steps,
            push: None,
        })
        .collect();
    let trials = run_trials(
        actor,
        &Wiring::plain(),
        &cfg.env,
        &NoiseConfig::off(),
        cfg.lit.k,
        &scenarios,
        derive_seed(seed, "fixed-eval-episodes"),
    )?;
    let sigma = cfg.env.reward.tracking_sigma;
    Ok(trials.iter().map(|t| t.lin_score(sigma)).sum::<f64>() / trials.len() as f64)
}

/// Tracking metrics over randomized dynamics with sensor noise.
pub fn randomized_suite(cfg: &RunConfig, actor: &Actor, wiring: &Wiring, seed: u64) -> Result<MetricsRow> {
    let mut rng = stream_rng(derive_seed(seed, "suite"), 0);
    let mut scenarios = Vec::with_capacity(cfg.eval.episodes);
    for _ in 0..cfg.eval.episodes {
        let params = sample_dynamics(&cfg.randomization, &cfg.env, &mut rng, false)?;
        scenarios.push(Scenario {
            params,
            command: uniform_command(&cfg.eval, &mut rng),
            steps: cfg.eval.episode_steps,
            push: None,
        });
    }
    let trials = run_trials(
        actor,
        wiring,
        &cfg.env,
        &cfg.randomization.noise,
        cfg.lit.k,
        &scenarios,
        derive_seed(seed, "suite-episodes"),
    )?;
    Ok(MetricsRow::from_trials("randomized", &trials))
}

/// Success rate per payload at the walking command, other parameters randomized.
pub fn payload_sweep(cfg: &RunConfig, actor: &Actor, wiring: &Wiring, seed: u64) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(cfg.eval.payload_grid.len());
    for (g, &payload) in cfg.eval.payload_grid.iter().enumerate() {
        let mut rng = stream_rng(derive_seed(seed, "payload"), g as u64);
        let mut scenarios = Vec::with_capacity(cfg.eval.payload_trials);
        for _ in 0..cfg.eval.payload_trials {
            let mut params = sample_dynamics(&cfg.randomization, &cfg.env, &mut rng, false)?;
            params.payload = payload;
            scenarios.push(Scenario {
                params,
                command: cfg.eval.walk_command,
                steps: cfg.eval.trial_steps,
                push: None,
            });
        }
        let trials = run_trials(
            actor,
            wiring,
            &cfg.env,
            &cfg.randomization.noise,
            cfg.lit.k,
            &scenarios,
            derive_seed(seed, &format!("payload-episodes-{g}")),
        )?;
        rows.push(MetricsRow::from_trials(format!("payload={payload}"), &trials));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PushBin {
    pub lo: f64,
    pub hi: f64,
    pub trials: usize,
    pub survived: usize,
}

/// Survival counts grouped by push magnitude.
pub fn bin_pushes(records: &[TrialRecord], edges: &[f64], range: f64) -> Vec<PushBin> {
    let top = (2.0f64).sqrt() * range;
    let mut bounds = vec![0.0];
    bounds.extend(edges.iter().copied().filter(|e| *e < top));
    bounds.push(top.max(bounds[bounds.len() - 1]));
    let mut bins: Vec<PushBin> = bounds
        .windows(2)
        .map(|w| PushBin {
            lo: w[0],
            hi: w[1],
            trials: 0,
            survived: 0,
        })
        .collect();
    for r in records {
        let m = r.push[0].hypot(r.push[1]);
        let idx = bins.iter().position(|b| m < b.hi).unwrap_or(bins.len() - 1);
        bins[idx].trials += 1;
        bins[idx].survived += r.survived as usize;
    }
    bins
}

/// Walking trials, each with one push drawn from the box `[-range, range]^2`.
pub fn push_grid(
    cfg: &RunConfig,
    actor: &Actor,
    wiring: &Wiring,
    seed: u64,
) -> Result<(Vec<TrialRecord>, Vec<PushBin>)> {
    let mut rng = stream_rng(derive_seed(seed, "push"), 0);
    let r = cfg.eval.push_range;
    let [w0, w1] = cfg.eval.push_window;
    let mut scenarios = Vec::with_capacity(cfg.eval.push_samples);
    for _ in 0..cfg.eval.push_samples {
        let params = sample_dynamics(&cfg.randomization, &cfg.env, &mut rng, false)?;
        let dv = if r > 0.0 {
            [rng.random_range(-r..=r), rng.random_range(-r..=r)]
        } else {
            [0.0, 0.0]
        };
        let step = rng.random_range(w0..=w1);
        scenarios.push(Scenario {
            params,
            command: cfg.eval.walk_command,
            steps: cfg.eval.trial_steps,
            push: Some((step, dv)),
        });
    }
    let records = run_trials(
        actor,
        wiring,
        &cfg.env,
        &cfg.randomization.noise,
        cfg.lit.k,
        &scenarios,
        derive_seed(seed, "push-episodes"),
    )?;
    let bins = bin_pushes(&records, &cfg.eval.push_bins, r);
    Ok((records, bins))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub series: ProbeSeries,
    pub correlation: Correlation,
}

impl CorrelationReport {
    /// Positive correlation of at least `min_r` and a larger error after onset.
    pub fn holds(&self, min_r: f64) -> bool {
        self.correlation.value().is_some_and(|r| r >= min_r)
            && self.series.post_onset_error() > self.series.pre_onset_error()
    }
}

/// Drives the ideal policy on the nominal plant with a constant command and an
/// unseen external force from the onset step, then correlates sigma with the
/// model's prediction error.
pub fn correlation_report(cfg: &RunConfig, reference: &Reference, seed: u64) -> Result<CorrelationReport> {
    let e = &cfg.eval;
    let mut env_cfg = cfg.env.clone();
    env_cfg.episode_steps = e.correlation_steps + 1;
    let mut env = PlanarEnv::new(env_cfg, NoiseConfig::off());
    env.resample_commands = false;
    let mut rng = stream_rng(derive_seed(seed, "correlation"), 0);
    let mut params = DynamicsParams::nominal(&cfg.env);
    params.ext_force = e.correlation_force;
    params.force_onset = e.correlation_onset;
    let (mut st, mut obs) = env.reset(params, 0, &mut rng);
    st.command = e.correlation_command;
    obs.0[..3].copy_from_slice(&e.correlation_command);
    let mut hist = ObservationHistory::filled(obs.0, reference.ideal.frames);
    let bound = 1.0 / cfg.lit.k;
    let mut traj = Vec::with_capacity(e.correlation_steps as usize);
    for _ in 0..e.correlation_steps {
        let a = reference.ideal.mean(&crate::policy::ActorInput::plain(&hist))?;
        let applied: [f64; ACTION_DIM] = std::array::from_fn(|j| a[j].clamp(-bound, bound));
        let current = ObservationFrame(*hist.newest());
        let r = env.step(&mut st, &a, cfg.lit.k, &mut rng);
        traj.push(ProbeStep {
            obs: current,
            action: applied,
            next_obs: r.obs,
        });
        if r.done {
            break;
        }
        hist.push(r.obs.0);
    }
    let series = sigma_error_probe(
        &reference.model,
        &traj,
        e.correlation_onset as usize,
        cfg.dynamics.probe_aggregate,
    )?;
    let correlation = pearson(&series.sigma, &series.error)?;
    Ok(CorrelationReport { series, correlation })
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for k in wins..=n {
        total += binomial(n, k);
    }
    total / 2f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Final metrics of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: char,
    pub seed: u64,
    pub final_lin_score: f64,
    pub final_ang_score: f64,
    pub lin_error: f64,
    pub ang_error: f64,
    pub success_rate: f64,
    pub heavy_payload_success: f64,
    pub push_survived: usize,
    pub push_trials: usize,
    pub diverged: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayloadRow {
    pub variant: char,
    pub seed: u64,
    pub payload: f64,
    pub lin_error: f64,
    pub ang_error: f64,
    pub success_rate: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PushRow {
    pub variant: char,
    pub seed: u64,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub trials: usize,
    pub survived: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub seed: u64,
    pub step: usize,
    pub sigma: f64,
    pub error: f64,
    pub post_onset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationSummaryRow {
    pub seed: u64,
    /// Empty when the series is degenerate.
    pub pearson_r: Option<f64>,
    pub pre_onset_error: f64,
    pub post_onset_error: f64,
}

pub fn correlation_rows(seed: u64, s: &ProbeSeries) -> Vec<CorrelationRow> {
    s.sigma
        .iter()
        .zip(&s.error)
        .enumerate()
        .map(|(t, (sg, e))| CorrelationRow {
            seed,
            step: t,
            sigma: *sg,
            error: *e,
            post_onset: t >= s.onset,
        })
        .collect()
}

pub fn correlation_summary(seed: u64, r: &CorrelationReport) -> CorrelationSummaryRow {
    CorrelationSummaryRow {
        seed,
        pearson_r: r.correlation.value(),
        pre_onset_error: r.series.pre_onset_error(),
        post_onset_error: r.series.post_onset_error(),
    }
}

/// Everything one ablation produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationResult {
    pub curves: Vec<CurveRow>,
    pub summary: Vec<SummaryRow>,
    pub payload: Vec<PayloadRow>,
    pub push: Vec<PushRow>,
    pub correlation: Vec<CorrelationRow>,
    pub correlation_summary: Vec<CorrelationSummaryRow>,
    /// Runs that could not complete, as `(variant, seed, message)`.
    pub failures: Vec<(char, u64, String)>,
}

/// Evaluates one trained policy and appends its rows.
pub fn evaluate_policy(
    cfg: &RunConfig,
    actor: &Actor,
    wiring: &Wiring,
    seed: u64,
    curves: &[CurveRow],
    diverged: Option<&str>,
    out: &mut AblationResult,
) -> Result<()> {
    let tag = wiring.variant.tag;
    let eval_seed = derive_seed(seed, "evaluation");
    let suite = randomized_suite(cfg, actor, wiring, eval_seed)?;
    let payload = payload_sweep(cfg, actor, wiring, eval_seed)?;
    let (push, bins) = push_grid(cfg, actor, wiring, eval_seed)?;
    for (p, row) in cfg.eval.payload_grid.iter().zip(&payload) {
        out.payload.push(PayloadRow {
            variant: tag,
            seed,
            payload: *p,
            lin_error: row.lin_error,
            ang_error: row.ang_error,
            success_rate: row.success_rate,
            n_trials: row.n_trials,
        });
    }
    for b in &bins {
        out.push.push(PushRow {
            variant: tag,
            seed,
            bin_lo: b.lo,
            bin_hi: b.hi,
            trials: b.trials,
            survived: b.survived,
        });
    }
    let last = curves.last();
    out.summary.push(SummaryRow {
        variant: tag,
        seed,
        final_lin_score: last.map_or(0.0, |c| c.lin_score),
        final_ang_score: last.map_or(0.0, |c| c.ang_score),
        lin_error: suite.lin_error,
        ang_error: suite.ang_error,
        success_rate: suite.success_rate,
        heavy_payload_success: payload.last().map_or(0.0, |r| r.success_rate),
        push_survived: push.iter().filter(|r| r.survived).count(),
        push_trials: push.len(),
        diverged: diverged.unwrap_or("").to_string(),
    });
    Ok(())
}

/// Trains a reference per seed, then every requested variant on top of it, and
/// evaluates each. A failed run is recorded and the matrix continues.
pub fn ablation_matrix(
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut log: impl FnMut(&str),
) -> Result<AblationResult> {
    cfg.validate()?;
    let mut out = AblationResult::default();
    for &seed in seeds {
        let needs_ref = variants.iter().any(|v| v.needs_reference());
        let reference = if needs_ref {
            log(&format!("seed {seed}: training reference"));
            match train_reference(cfg, seed, |_| {}) {
                Ok(r) => {
                    let report = correlation_report(cfg, &r.reference, seed)?;
                    out.correlation.extend(correlation_rows(seed, &report.series));
                    out.correlation_summary.push(correlation_summary(seed, &report));
                    Some(r.reference)
                }
                Err(e) => {
                    log(&format!("seed {seed}: reference failed: {e}"));
                    out.failures.push(('R', seed, e.to_string()));
                    None
                }
            }
        } else {
            None
        };
        for v in variants {
            log(&format!("seed {seed}: training variant {v}"));
            let run = if v.needs_reference() && reference.is_none() {
                Err(Error::MissingReference(v.tag))
            } else {
                train_robust(cfg, reference.as_ref(), *v, seed, |_| {})
            };
            match run {
                Ok(r) => {
                    out.curves.extend(r.curves.iter().copied());
                    evaluate_policy(cfg, &r.actor, &r.wiring, seed, &r.curves, r.diverged.as_deref(), &mut out)?;
                }
                Err(e) => {
                    log(&format!("seed {seed}: variant {v} failed: {e}"));
                    out.failures.push((v.tag, seed, e.to_string()));
                }
            }
        }
    }
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const CURVES_HEADER: [&str; 6] = ["iter", "variant", "seed", "lin_score", "ang_score", "level"];

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    write_rows(path, rows, &CURVES_HEADER)
}

pub fn write_payload(path: &Path, rows: &[PayloadRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &["variant", "seed", "payload_kg", "lin_error", "ang_error", "success_rate", "n_trials"],
    )
}

pub fn write_push(path: &Path, rows: &[PushRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &["variant", "seed", "bin_lo_mps", "bin_hi_mps", "trials", "survived"],
    )
}

pub fn write_push_trials(path: &Path, variant: char, seed: u64, rows: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant", "seed", "trial", "push_x_mps", "push_y_mps", "push_step", "survived", "steps",
    ])?;
    for (i, r) in rows.iter().enumerate() {
        w.serialize((
            variant,
            seed,
            i,
            r.push[0],
            r.push[1],
            r.push_step,
            r.survived,
            r.steps,
        ))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlation(path: &Path, rows: &[CorrelationRow]) -> Result<()> {
    write_rows(path, rows, &["seed", "step", "sigma", "error", "post_onset"])
}

pub fn write_correlation_summary(path: &Path, rows: &[CorrelationSummaryRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &["seed", "pearson_r", "pre_onset_error", "post_onset_error"],
    )
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &[
            "variant",
            "seed",
            "final_lin_score",
            "final_ang_score",
            "lin_error",
            "ang_error",
            "success_rate",
            "heavy_payload_success",
            "push_survived",
            "push_trials",
            "diverged",
        ],
    )
}

/// Writes all ablation CSVs into `dir`.
pub fn write_ablation(dir: &Path, r: &AblationResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_curves(&dir.join("curves.csv"), &r.curves)?;
    write_summary(&dir.join("summary.csv"), &r.summary)?;
    write_payload(&dir.join("payload.csv"), &r.payload)?;
    write_push(&dir.join("push.csv"), &r.push)?;
    write_correlation(&dir.join("correlation.csv"), &r.correlation)?;
    write_correlation_summary(&dir.join("correlation_summary.csv"), &r.correlation_summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracking_error_cases() {
        let v = vec![[1.0, 0.0, 0.5]; 4];
        assert_eq!(tracking_error(&v, &v).unwrap(), (0.0, 0.0));
        let c = vec![[0.5, 0.0, 0.5]; 4];
        assert_eq!(tracking_error(&v, &c).unwrap(), (0.25, 0.0));
        assert!(tracking_error(&[], &[]).is_err());
        assert!(tracking_error(&v, &c[..3]).is_err());
    }

    #[test]
    fn tracking_error_matches_direct_sum() {
        let mut rng = stream_rng(1, 0);
        let v: Vec<[f64; 3]> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
            .collect();
        let c: Vec<[f64; 3]> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
            .collect();
        let (lin, ang) = tracking_error(&v, &c).unwrap();
        let mut sl = 0.0;
        let mut sa = 0.0;
        for i in 0..50 {
            let dx = v[i][0] - c[i][0];
            let dy = v[i][1] - c[i][1];
            sl += dx * dx + dy * dy;
            sa += (v[i][2] - c[i][2]) * (v[i][2] - c[i][2]);
        }
        assert!((lin - sl / 50.0).abs() < 1e-12);
        assert!((ang - sa / 50.0).abs() < 1e-12);
    }

    #[test]
    fn tracking_error_is_reflection_invariant() {
        let v = vec![[0.3, 0.4, 0.1], [0.2, -0.5, -0.3]];
        let c = vec![[1.0, 0.1, 0.0], [0.9, 0.2, 0.2]];
        let refl = |x: &Vec<[f64; 3]>| x.iter().map(|r| [r[0], -r[1], -r[2]]).collect::<Vec<_>>();
        assert_eq!(tracking_error(&v, &c).unwrap(), tracking_error(&refl(&v), &refl(&c)).unwrap());
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(5, 5), 1.0 / 32.0);
        assert_eq!(sign_test_p(4, 5), 6.0 / 32.0);
        assert_eq!(sign_test_p(0, 5), 1.0);
        assert!(sign_test_p(5, 5) < 0.05 && sign_test_p(4, 5) > 0.05);
    }

    #[test]
    fn success_rate_is_mean_of_flags() {
        let mk = |s| TrialRecord {
            payload: 0.0,
            push: [0.0; 2],
            push_step: 0,
            survived: s,
            steps: 1,
            velocity: vec![[0.0; 3]],
            commands: vec![[0.0; 3]],
        };
        let t = vec![mk(true), mk(false), mk(true), mk(true)];
        assert_eq!(success_rate(&t), 0.75);
        assert_eq!(MetricsRow::from_trials("x", &t).success_rate, 0.75);
    }

    #[test]
    fn push_bins_cover_box() {
        let mk = |p: [f64; 2], s| TrialRecord {
            payload: 0.0,
            push: p,
            push_step: 100,
            survived: s,
            steps: 1,
            velocity: vec![],
            commands: vec![],
        };
        let recs = vec![
            mk([0.5, 0.0], true),
            mk([1.5, 0.0], true),
            mk([2.5, 2.5], false),
            mk([3.0, 3.0], false),
        ];
        let bins = bin_pushes(&recs, &[1.0, 2.0], 3.0);
        assert_eq!(bins.len(), 3);
        assert_eq!(bins.iter().map(|b| b.trials).sum::<usize>(), 4);
        assert_eq!((bins[0].trials, bins[1].trials, bins[2].trials), (1, 1, 2));
        assert_eq!(bins[2].survived, 0);
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let bad = EvalConfig {
            push_window: [150, 100],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            ablation_variants: "AZ".into(),
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
