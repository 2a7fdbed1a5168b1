//! Planar velocity-tracking body: a holonomic rigid body driven by a
//! longitudinal force, a lateral force and a yaw torque, with randomized hidden
//! dynamics, sensor noise/bias/delay, pushes and a command curriculum.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::scale_action;
use crate::rng::{stream_rng, SimRng};

pub const ACTION_DIM: usize = 3;
pub const OBS_DIM: usize = 9;
pub const PRIV_DIM: usize = 18;

/// Actor-visible frame: command (3), measured body velocity (2), measured yaw
/// rate (1), previous action (3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationFrame(pub [f64; OBS_DIM]);

impl ObservationFrame {
    pub fn command(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }
    pub fn velocity(&self) -> [f64; 2] {
        [self.0[3], self.0[4]]
    }
    pub fn yaw_rate(&self) -> f64 {
        self.0[5]
    }
    pub fn prev_action(&self) -> [f64; 3] {
        [self.0[6], self.0[7], self.0[8]]
    }
}

/// Critic-only frame: the actor frame followed by true body velocity (2), true
/// yaw rate (1), active external force in the body frame (2) and the dynamics
/// scalars total mass, linear drag, angular drag, actuator gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivilegedObservation(pub [f64; PRIV_DIM]);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub max_level: u32,
    /// Per-axis linear command half-range at level 0 and at `max_level` (m/s).
    pub lin_range: [f64; 2],
    /// Yaw-rate command half-range at level 0 and at `max_level` (rad/s).
    pub yaw_range: [f64; 2],
    /// Training push half-range at `max_level` (m/s per axis); level 0 has none.
    pub push_max: f64,
    pub promote_at: f64,
    pub demote_below: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            max_level: 5,
            lin_range: [0.5, 3.0],
            yaw_range: [0.5, 3.0],
            push_max: 1.0,
            promote_at: 0.8,
            demote_below: 0.4,
        }
    }
}

impl CurriculumConfig {
    fn fraction(&self, level: u32) -> f64 {
        if self.max_level == 0 {
            0.0
        } else {
            level.min(self.max_level) as f64 / self.max_level as f64
        }
    }

    pub fn lin_range_at(&self, level: u32) -> f64 {
        let f = self.fraction(level);
        self.lin_range[0] + f * (self.lin_range[1] - self.lin_range[0])
    }

    pub fn yaw_range_at(&self, level: u32) -> f64 {
        let f = self.fraction(level);
        self.yaw_range[0] + f * (self.yaw_range[1] - self.yaw_range[0])
    }

    pub fn push_at(&self, level: u32) -> f64 {
        self.fraction(level) * self.push_max
    }

    pub fn validate(&self) -> Result<()> {
        check_range("env.curriculum.lin_range", self.lin_range)?;
        check_range("env.curriculum.yaw_range", self.yaw_range)?;
        if self.lin_range[0] < 0.0 || self.yaw_range[0] < 0.0 || self.push_max < 0.0 {
            return Err(Error::Config("curriculum ranges must be >= 0".into()));
        }
        if !(self.demote_below <= self.promote_at) {
            return Err(Error::Config(
                "env.curriculum.demote_below must not exceed promote_at".into(),
            ));
        }
        Ok(())
    }
}

/// Reward weights. Penalty terms are stored as non-positive values, so every
/// weight here is a non-negative magnitude.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lin_tracking: f64,
    pub ang_tracking: f64,
    pub action_rate: f64,
    pub smoothness: f64,
    pub energy: f64,
    /// Denominator of the exponential tracking kernels.
    pub tracking_sigma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lin_tracking: 1.0,
            ang_tracking: 0.5,
            action_rate: 0.01,
            smoothness: 0.01,
            energy: 2e-4,
            tracking_sigma: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub episode_steps: u32,
    pub command_interval: u32,
    pub mass: f64,
    pub inertia: f64,
    pub lin_drag: f64,
    pub ang_drag: f64,
    pub force_max: f64,
    pub torque_max: f64,
    /// Failure when the speed exceeds this bound (m/s).
    pub max_speed: f64,
    /// Failure when |yaw rate| exceeds this bound (rad/s).
    pub max_yaw_rate: f64,
    /// Half-range of the uniform initial velocity / yaw-rate perturbation.
    pub init_perturbation: f64,
    /// Steps between training pushes (randomized mode only); 0 disables them.
    pub push_interval: u32,
    pub reward: RewardWeights,
    pub curriculum: CurriculumConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            episode_steps: 1000,
            command_interval: 25,
            mass: 1.0,
            inertia: 0.1,
            lin_drag: 1.0,
            ang_drag: 1.0,
            force_max: 50.0,
            torque_max: 5.0,
            max_speed: 5.0,
            max_yaw_rate: 10.0,
            init_perturbation: 0.1,
            push_interval: 200,
            reward: RewardWeights::default(),
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.dt", self.dt),
            ("env.mass", self.mass),
            ("env.inertia", self.inertia),
            ("env.force_max", self.force_max),
            ("env.torque_max", self.torque_max),
            ("env.max_speed", self.max_speed),
            ("env.max_yaw_rate", self.max_yaw_rate),
            ("env.reward.tracking_sigma", self.reward.tracking_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.lin_drag < 0.0 || self.ang_drag < 0.0 || self.init_perturbation < 0.0 {
            return Err(Error::Config("drag and perturbation must be >= 0".into()));
        }
        if self.episode_steps == 0 || self.command_interval == 0 {
            return Err(Error::Config(
                "env.episode_steps and env.command_interval must be > 0".into(),
            ));
        }
        self.curriculum.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub velocity_std: f64,
    pub yaw_rate_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            velocity_std: 0.05,
            yaw_rate_std: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self {
            velocity_std: 0.0,
            yaw_rate_std: 0.0,
        }
    }
}

/// Ranges for the randomized hidden dynamics. Scale ranges multiply the nominal
/// values in [`EnvConfig`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub mass_scale: [f64; 2],
    pub inertia_scale: [f64; 2],
    pub payload: [f64; 2],
    pub drag_scale: [f64; 2],
    pub gain: [f64; 2],
    pub max_delay: u32,
    /// Radius of the disk the per-episode external force is drawn from (N).
    pub force_max: f64,
    /// Per-axis half-range of the velocity sensor bias (m/s).
    pub sensor_bias: f64,
    pub noise: NoiseConfig,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            mass_scale: [0.8, 1.2],
            inertia_scale: [0.8, 1.2],
            payload: [-0.2, 0.5],
            drag_scale: [0.5, 1.5],
            gain: [0.9, 1.1],
            max_delay: 3,
            force_max: 2.5,
            sensor_bias: 0.05,
            noise: NoiseConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(Error::Config(format!(
            "{name}: range [{}, {}] is not well-ordered",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("randomization.mass_scale", self.mass_scale)?;
        check_range("randomization.inertia_scale", self.inertia_scale)?;
        check_range("randomization.payload", self.payload)?;
        check_range("randomization.drag_scale", self.drag_scale)?;
        check_range("randomization.gain", self.gain)?;
        if self.mass_scale[0] <= 0.0 || self.inertia_scale[0] <= 0.0 || self.gain[0] <= 0.0 {
            return Err(Error::Config(
                "mass, inertia and gain scales must be > 0".into(),
            ));
        }
        if self.drag_scale[0] < 0.0 {
            return Err(Error::Config("drag scale must be >= 0".into()));
        }
        if self.force_max < 0.0 || self.sensor_bias < 0.0 {
            return Err(Error::Config(
                "force_max and sensor_bias must be >= 0".into(),
            ));
        }
        if self.noise.velocity_std < 0.0 || self.noise.yaw_rate_std < 0.0 {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Hidden per-episode dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    pub mass: f64,
    pub inertia: f64,
    pub lin_drag: f64,
    pub ang_drag: f64,
    pub gain: f64,
    pub payload: f64,
    /// World-frame external force (N).
    pub ext_force: [f64; 2],
    /// Step index from which `ext_force` acts.
    pub force_onset: u32,
    pub sensor_bias: [f64; 2],
    pub delay: usize,
}

impl DynamicsParams {
    pub fn nominal(cfg: &EnvConfig) -> Self {
        Self {
            mass: cfg.mass,
            inertia: cfg.inertia,
            lin_drag: cfg.lin_drag,
            ang_drag: cfg.ang_drag,
            gain: 1.0,
            payload: 0.0,
            ext_force: [0.0, 0.0],
            force_onset: 0,
            sensor_bias: [0.0, 0.0],
            delay: 0,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass + self.payload
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_mass() > 0.0)
            || !(self.inertia > 0.0)
            || !(self.gain > 0.0)
            || self.lin_drag < 0.0
            || self.ang_drag < 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid dynamics parameters: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Draws episode dynamics. `fixed` returns the nominal plant exactly (no payload,
/// no external force, no delay, no bias).
pub fn sample_dynamics<R: Rng + ?Sized>(
    cfg: &RandomizationConfig,
    env: &EnvConfig,
    rng: &mut R,
    fixed: bool,
) -> Result<DynamicsParams> {
    cfg.validate()?;
    if fixed {
        return Ok(DynamicsParams::nominal(env));
    }
    let mut u = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
    let mass = env.mass * u(cfg.mass_scale);
    let inertia = env.inertia * u(cfg.inertia_scale);
    let payload = u(cfg.payload);
    let drag = u(cfg.drag_scale);
    let lin_drag = env.lin_drag * drag;
    let ang_drag = env.ang_drag * u(cfg.drag_scale);
    let gain = u(cfg.gain);
    let bias = [
        u([-cfg.sensor_bias, cfg.sensor_bias]),
        u([-cfg.sensor_bias, cfg.sensor_bias]),
    ];
    let radius = cfg.force_max * u([0.0, 1.0]).sqrt();
    let angle = u([-std::f64::consts::PI, std::f64::consts::PI]);
    let delay = rng.random_range(0..=cfg.max_delay) as usize;
    let p = DynamicsParams {
        mass,
        inertia,
        lin_drag,
        ang_drag,
        gain,
        payload,
        ext_force: [radius * angle.cos(), radius * angle.sin()],
        force_onset: 0,
        sensor_bias: bias,
        delay,
    };
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub heading: f64,
    /// World-frame linear velocity.
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
    pub step: u32,
    pub command: [f64; 3],
    /// `[a_{t-1}, a_{t-2}]`
    pub last_actions: [[f64; 3]; 2],
    /// True sensor readings `(v_body_x, v_body_y, yaw_rate)`, newest at the back.
    pub sensor_ring: VecDeque<[f64; 3]>,
    pub params: DynamicsParams,
    pub level: u32,
}

impl EnvState {
    pub fn body_velocity(&self) -> [f64; 2] {
        rotate(self.velocity, -self.heading)
    }

    pub fn active_force(&self) -> [f64; 2] {
        if self.step >= self.params.force_onset {
            self.params.ext_force
        } else {
            [0.0, 0.0]
        }
    }

    /// Overwrites the newest sensor reading with the current true state, e.g.
    /// after an instantaneous push at the step boundary.
    pub fn refresh_sensor(&mut self) {
        let v = self.body_velocity();
        if let Some(last) = self.sensor_ring.back_mut() {
            *last = [v[0], v[1], self.yaw_rate];
        }
    }

    fn push_sensor(&mut self) {
        let v = self.body_velocity();
        self.sensor_ring.push_back([v[0], v[1], self.yaw_rate]);
        while self.sensor_ring.len() > self.params.delay + 1 {
            self.sensor_ring.pop_front();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.heading.is_finite()
            && self.yaw_rate.is_finite()
    }
}

#[inline]
pub fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Per-term rewards. Tracking terms lie in (0, 1]; penalty terms are <= 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardTerms {
    pub lin_tracking: f64,
    pub ang_tracking: f64,
    pub action_rate: f64,
    pub smoothness: f64,
    pub energy: f64,
    pub total: f64,
}

/// Tracking score `exp(-err^2 / sigma)`.
#[inline]
pub fn tracking_score(sq_err: f64, sigma: f64) -> f64 {
    (-sq_err / sigma).exp()
}

pub fn compute_reward(
    state_after: &EnvState,
    action: &[f64; 3],
    prev: &[f64; 3],
    prev2: &[f64; 3],
    w: &RewardWeights,
) -> RewardTerms {
    let v = state_after.body_velocity();
    let c = state_after.command;
    let lin_err = (c[0] - v[0]).powi(2) + (c[1] - v[1]).powi(2);
    let ang_err = (c[2] - state_after.yaw_rate).powi(2);
    let mut rate = 0.0;
    let mut smooth = 0.0;
    let mut energy = 0.0;
    for i in 0..3 {
        rate += (action[i] - prev[i]).powi(2);
        smooth += (action[i] - 2.0 * prev[i] + prev2[i]).powi(2);
        energy += action[i] * action[i];
    }
    let mut t = RewardTerms {
        lin_tracking: tracking_score(lin_err, w.tracking_sigma),
        ang_tracking: tracking_score(ang_err, w.tracking_sigma),
        action_rate: -rate,
        smoothness: -smooth,
        energy: -energy,
        total: 0.0,
    };
    t.total = w.lin_tracking * t.lin_tracking
        + w.ang_tracking * t.ang_tracking
        + w.action_rate * t.action_rate
        + w.smoothness * t.smoothness
        + w.energy * t.energy;
    t
}

/// One semi-implicit Euler step under a body-frame force and a yaw torque.
pub fn integrate(state: &mut EnvState, body_force: [f64; 2], torque: f64, dt: f64) {
    let p = &state.params;
    let m = p.total_mass();
    let f_world = rotate(body_force, state.heading);
    let f_ext = state.active_force();
    for i in 0..2 {
        state.velocity[i] +=
            dt * (f_world[i] + f_ext[i]) / m - dt * p.lin_drag * state.velocity[i];
    }
    state.yaw_rate += dt * torque / p.inertia - dt * p.ang_drag * state.yaw_rate;
    for i in 0..2 {
        state.position[i] += dt * state.velocity[i];
    }
    state.heading += dt * state.yaw_rate;
}

/// Adds a uniform velocity kick in `[-speed_range, speed_range]^2` (world frame)
/// and returns it.
pub fn apply_push<R: Rng + ?Sized>(state: &mut EnvState, rng: &mut R, speed_range: f64) -> [f64; 2] {
    if speed_range <= 0.0 {
        return [0.0, 0.0];
    }
    let d = [
        rng.random_range(-speed_range..=speed_range),
        rng.random_range(-speed_range..=speed_range),
    ];
    state.velocity[0] += d[0];
    state.velocity[1] += d[1];
    d
}

/// Promotion at `promote_at`, demotion below `demote_below`, clamped to the
/// level table.
pub fn curriculum_update(level: u32, mean_lin_tracking: f64, cfg: &CurriculumConfig) -> u32 {
    let level = level.min(cfg.max_level);
    if mean_lin_tracking >= cfg.promote_at {
        (level + 1).min(cfg.max_level)
    } else if mean_lin_tracking < cfg.demote_below {
        level.saturating_sub(1)
    } else {
        level
    }
}

pub fn sample_command<R: Rng + ?Sized>(cfg: &CurriculumConfig, level: u32, rng: &mut R) -> [f64; 3] {
    let l = cfg.lin_range_at(level);
    let y = cfg.yaw_range_at(level);
    [
        l * (2.0 * rng.random::<f64>() - 1.0),
        l * (2.0 * rng.random::<f64>() - 1.0),
        y * (2.0 * rng.random::<f64>() - 1.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub obs: ObservationFrame,
    pub reward: RewardTerms,
    pub done: bool,
    pub failed: bool,
}

/// Physics, sensing and reward for one body. Holds no episode state.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarEnv {
    pub cfg: EnvConfig,
    pub noise: NoiseConfig,
    /// When false the command is never resampled inside an episode.
    pub resample_commands: bool,
}

impl PlanarEnv {
    pub fn new(cfg: EnvConfig, noise: NoiseConfig) -> Self {
        Self {
            cfg,
            noise,
            resample_commands: true,
        }
    }

    pub fn reset<R: Rng + ?Sized>(
        &self,
        params: DynamicsParams,
        level: u32,
        rng: &mut R,
    ) -> (EnvState, ObservationFrame) {
        let p = self.cfg.init_perturbation;
        let mut jitter = || {
            if p > 0.0 {
                rng.random_range(-p..=p)
            } else {
                0.0
            }
        };
        let velocity = [jitter(), jitter()];
        let yaw_rate = jitter();
        let command = sample_command(&self.cfg.curriculum, level, rng);
        let mut state = EnvState {
            position: [0.0, 0.0],
            heading: 0.0,
            velocity,
            yaw_rate,
            step: 0,
            command,
            last_actions: [[0.0; 3]; 2],
            sensor_ring: VecDeque::with_capacity(params.delay + 1),
            params,
            level,
        };
        let v = state.body_velocity();
        for _ in 0..=state.params.delay {
            state.sensor_ring.push_back([v[0], v[1], yaw_rate]);
        }
        let obs = self.observe(&state, rng);
        (state, obs)
    }

    /// Delayed, biased, noisy sensor reading plus the undelayed command and
    /// previous action.
    pub fn observe<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> ObservationFrame {
        let d = state.params.delay.min(state.sensor_ring.len() - 1);
        let s = state.sensor_ring[state.sensor_ring.len() - 1 - d];
        let n0: f64 = rng.sample(StandardNormal);
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let b = state.params.sensor_bias;
        let a = state.last_actions[0];
        ObservationFrame([
            state.command[0],
            state.command[1],
            state.command[2],
            s[0] + b[0] + self.noise.velocity_std * n0,
            s[1] + b[1] + self.noise.velocity_std * n1,
            s[2] + self.noise.yaw_rate_std * n2,
            a[0],
            a[1],
            a[2],
        ])
    }

    pub fn privileged(&self, state: &EnvState, obs: &ObservationFrame) -> PrivilegedObservation {
        let mut o = [0.0; PRIV_DIM];
        o[..OBS_DIM].copy_from_slice(&obs.0);
        let v = state.body_velocity();
        let f = rotate(state.active_force(), -state.heading);
        let p = &state.params;
        o[9] = v[0];
        o[10] = v[1];
        o[11] = state.yaw_rate;
        o[12] = f[0];
        o[13] = f[1];
        o[14] = p.total_mass();
        o[15] = p.lin_drag;
        o[16] = p.ang_drag;
        o[17] = p.gain;
        PrivilegedObservation(o)
    }

    /// Physics, reward, termination and command resampling for one control step,
    /// without producing an observation. A non-finite action ends the episode as
    /// a failure without touching the physics.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        state: &mut EnvState,
        action: &[f64; 3],
        k: f64,
        rng: &mut R,
    ) -> (RewardTerms, bool, bool) {
        let w = &self.cfg.reward;
        if action.iter().any(|a| !a.is_finite()) {
            let zero = [0.0; 3];
            let reward = compute_reward(
                state,
                &zero,
                &state.last_actions[0],
                &state.last_actions[1],
                w,
            );
            return (reward, true, true);
        }
        let bound = 1.0 / k;
        let a = [
            action[0].clamp(-bound, bound),
            action[1].clamp(-bound, bound),
            action[2].clamp(-bound, bound),
        ];
        let target = scale_action(&a, k, &[0.0; 3]);
        let g = state.params.gain;
        let force = [
            g * target[0] * self.cfg.force_max,
            g * target[1] * self.cfg.force_max,
        ];
        let torque = g * target[2] * self.cfg.torque_max;
        integrate(state, force, torque, self.cfg.dt);
        state.step += 1;
        state.push_sensor();

        let reward = compute_reward(state, &a, &state.last_actions[0], &state.last_actions[1], w);
        state.last_actions[1] = state.last_actions[0];
        state.last_actions[0] = a;

        let failed = self.diverged(state);
        let done = failed || state.step >= self.cfg.episode_steps;
        if !done && self.resample_commands && state.step % self.cfg.command_interval == 0 {
            state.command = sample_command(&self.cfg.curriculum, state.level, rng);
        }
        (reward, done, failed)
    }

    pub fn diverged(&self, state: &EnvState) -> bool {
        let speed = (state.velocity[0].powi(2) + state.velocity[1].powi(2)).sqrt();
        !state.is_finite()
            || speed > self.cfg.max_speed
            || state.yaw_rate.abs() > self.cfg.max_yaw_rate
    }

    /// [`advance`](Self::advance) followed by [`observe`](Self::observe).
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut EnvState,
        action: &[f64; 3],
        k: f64,
        rng: &mut R,
    ) -> StepResult {
        let (reward, done, failed) = self.advance(state, action, k, rng);
        let obs = self.observe(state, rng);
        StepResult {
            obs,
            reward,
            done,
            failed,
        }
    }
}

/// How a batch of environments draws its episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvMode {
    /// Nominal dynamics, no noise, no pushes.
    Fixed,
    /// Full randomization, sensor noise and curriculum-scaled pushes.
    Randomized,
}

/// Per-instance bookkeeping of a [`VecEnv`].
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub state: EnvState,
    pub obs: ObservationFrame,
    pub rng: SimRng,
    /// True when the last step started a new episode (reset or command change).
    pub command_changed: bool,
}

/// `N` independent environments with their own random streams.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub env: PlanarEnv,
    pub randomization: RandomizationConfig,
    pub mode: EnvMode,
    pub level: u32,
    pub slots: Vec<EnvSlot>,
}

/// Outcome of stepping one slot, after any automatic reset.
#[derive(Debug, Clone, Copy)]
pub struct SlotStep {
    pub reward: RewardTerms,
    pub done: bool,
    pub failed: bool,
    /// Observation produced by the step itself (before an automatic reset).
    pub terminal_obs: ObservationFrame,
    pub terminal_privileged: PrivilegedObservation,
    /// Whether `obs` of the slot now starts a fresh episode.
    pub reset: bool,
}

impl VecEnv {
    pub fn new(
        cfg: EnvConfig,
        randomization: RandomizationConfig,
        mode: EnvMode,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        randomization.validate()?;
        let noise = match mode {
            EnvMode::Fixed => NoiseConfig::off(),
            EnvMode::Randomized => randomization.noise.clone(),
        };
        let env = PlanarEnv::new(cfg, noise);
        let mut slots = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream_rng(seed, i as u64);
            let params =
                sample_dynamics(&randomization, &env.cfg, &mut rng, mode == EnvMode::Fixed)?;
            let (state, obs) = env.reset(params, 0, &mut rng);
            slots.push(EnvSlot {
                state,
                obs,
                rng,
                command_changed: true,
            });
        }
        Ok(Self {
            env,
            randomization,
            mode,
            level: 0,
            slots,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn privileged(&self, i: usize) -> PrivilegedObservation {
        let s = &self.slots[i];
        self.env.privileged(&s.state, &s.obs)
    }

    fn reset_slot(&mut self, i: usize) -> Result<()> {
        let fixed = self.mode == EnvMode::Fixed;
        let level = self.level;
        let slot = &mut self.slots[i];
        let params = sample_dynamics(&self.randomization, &self.env.cfg, &mut slot.rng, fixed)?;
        let (state, obs) = self.env.reset(params, level, &mut slot.rng);
        slot.state = state;
        slot.obs = obs;
        slot.command_changed = true;
        Ok(())
    }

    /// Steps slot `i`, resetting it when the episode ends.
    pub fn step_slot(&mut self, i: usize, action: &[f64; 3], k: f64) -> Result<SlotStep> {
        let push_range = match self.mode {
            EnvMode::Randomized => self.env.cfg.curriculum.push_at(self.level),
            EnvMode::Fixed => 0.0,
        };
        let push_interval = self.env.cfg.push_interval;
        let slot = &mut self.slots[i];
        let before = slot.state.command;
        let (reward, done, mut failed) = self.env.advance(&mut slot.state, action, k, &mut slot.rng);
        if !done && push_interval > 0 && push_range > 0.0 && slot.state.step % push_interval == 0 {
            apply_push(&mut slot.state, &mut slot.rng, push_range);
            slot.state.refresh_sensor();
        }
        slot.command_changed = slot.state.command != before;
        let mut obs = self.env.observe(&slot.state, &mut slot.rng);
        if !obs.0.iter().all(|v| v.is_finite()) {
            obs = ObservationFrame([0.0; OBS_DIM]);
            failed = true;
        }
        let done = done || failed;
        let terminal_privileged = self.env.privileged(&slot.state, &obs);
        slot.obs = obs;
        if done {
            self.reset_slot(i)?;
        }
        Ok(SlotStep {
            reward,
            done,
            failed,
            terminal_obs: obs,
            terminal_privileged,
            reset: done,
        })
    }

    /// Sets the level used by subsequent resets and command draws.
    pub fn set_level(&mut self, level: u32) {
        self.level = level.min(self.env.cfg.curriculum.max_level);
        for s in &mut self.slots {
            s.state.level = self.level;
        }
    }
}
