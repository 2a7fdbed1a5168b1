//! Actor-critic networks.
//!
//! The actor encodes the flattened observation history into a latent vector and
//! feeds `[latent, o_t, a_ref, o_ref]` to a Gaussian mean head with a
//! state-independent log-std. The reference slots exist only when the actor is
//! built with `has_refs`. The critic sees a history of privileged frames.

use std::collections::VecDeque;
use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ObservationFrame, ACTION_DIM, OBS_DIM, PRIV_DIM};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, ForwardCache, Mlp};

/// Width of the reference block: action reference (3) + observation reference (9).
pub const REF_DIM: usize = ACTION_DIM + OBS_DIM;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of past frames beyond the current one (history holds H + 1).
    pub history: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Gain of the final actor layer relative to an orthogonal init.
    pub actor_output_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            history: 5,
            encoder_hidden: vec![64],
            latent: 32,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            init_log_std: 0.5f64.ln(),
            actor_output_gain: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0
            || self.encoder_hidden.iter().any(|&d| d == 0)
            || self.actor_hidden.iter().any(|&d| d == 0)
            || self.critic_hidden.iter().any(|&d| d == 0)
        {
            return Err(Error::Config("network widths must be > 0".into()));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("network.init_log_std must be finite".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.history + 1
    }
}

/// Fixed-length stack of frames, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct History<const W: usize> {
    frames: VecDeque<[f64; W]>,
    len: usize,
}

pub type ObservationHistory = History<OBS_DIM>;
pub type PrivilegedHistory = History<PRIV_DIM>;

impl<const W: usize> History<W> {
    /// History of `len` copies of `frame`.
    pub fn filled(frame: [f64; W], len: usize) -> Self {
        assert!(len > 0, "history length must be > 0");
        Self {
            frames: std::iter::repeat_n(frame, len).collect(),
            len,
        }
    }

    pub fn reset(&mut self, frame: [f64; W]) {
        self.frames.iter_mut().for_each(|f| *f = frame);
    }

    pub fn push(&mut self, frame: [f64; W]) {
        self.frames.push_front(frame);
        self.frames.truncate(self.len);
    }

    pub fn newest(&self) -> &[f64; W] {
        &self.frames[0]
    }

    pub fn get(&self, age: usize) -> &[f64; W] {
        &self.frames[age]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        for (i, f) in self.frames.iter().enumerate() {
            out[i * W..(i + 1) * W].copy_from_slice(f);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len * W];
        self.write_flat(&mut v);
        v
    }
}

impl ObservationHistory {
    pub fn current(&self) -> ObservationFrame {
        ObservationFrame(*self.newest())
    }
}

/// Everything the actor reads at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorInput {
    pub history: Vec<f64>,
    pub action_ref: Option<[f64; ACTION_DIM]>,
    pub obs_ref: Option<[f64; OBS_DIM]>,
}

impl ActorInput {
    pub fn plain(history: &ObservationHistory) -> Self {
        Self {
            history: history.flatten(),
            action_ref: None,
            obs_ref: None,
        }
    }

    /// Flattened `[history, a_ref, o_ref]`; absent slots contribute nothing.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.history.clone();
        if let Some(a) = &self.action_ref {
            v.extend_from_slice(a);
        }
        if let Some(o) = &self.obs_ref {
            v.extend_from_slice(o);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub mean: [f64; ACTION_DIM],
    pub log_std: [f64; ACTION_DIM],
    pub sample: [f64; ACTION_DIM],
}

impl PolicyOutput {
    pub fn log_prob(&self) -> f64 {
        gaussian_log_prob(&self.mean, &self.log_std, &self.sample)
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 + 0.5 * LOG_2PI + ls).sum()
}

/// Actuator target `nominal + k * a`, clamped to the normalized bounds [-1, 1].
pub fn scale_action(a: &[f64; 3], k: f64, nominal: &[f64; 3]) -> [f64; 3] {
    let mut t = [0.0; 3];
    for i in 0..3 {
        t[i] = (nominal[i] + k * a[i]).clamp(-1.0, 1.0);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub encoder: Mlp,
    pub head: Mlp,
    pub log_std: Vec<f64>,
    pub frames: usize,
    pub has_refs: bool,
}

/// Cached batched forward pass of the actor.
#[derive(Debug, Clone)]
pub struct ActorCache {
    enc: ForwardCache,
    head: ForwardCache,
}

impl ActorCache {
    pub fn mean(&self) -> &Array2<f64> {
        self.head.output()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrads {
    pub encoder: Vec<f64>,
    pub head: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl ActorGrads {
    pub fn zeros_like(actor: &Actor) -> Self {
        Self {
            encoder: vec![0.0; actor.encoder.num_params()],
            head: vec![0.0; actor.head.num_params()],
            log_std: vec![0.0; actor.log_std.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.encoder[..], &self.head[..], &self.log_std[..]].concat()
    }
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, has_refs: bool, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let frames = cfg.frames();
        let mut enc_dims = vec![frames * OBS_DIM];
        enc_dims.extend(&cfg.encoder_hidden);
        enc_dims.push(cfg.latent);
        let encoder = Mlp::new(
            &enc_dims,
            Activation::Elu,
            Activation::Elu,
            std::f64::consts::SQRT_2,
            rng,
        )?;
        let mut head_dims = vec![cfg.latent + OBS_DIM + if has_refs { REF_DIM } else { 0 }];
        head_dims.extend(&cfg.actor_hidden);
        head_dims.push(ACTION_DIM);
        let head = Mlp::new(
            &head_dims,
            Activation::Elu,
            Activation::Tanh,
            cfg.actor_output_gain,
            rng,
        )?;
        Ok(Self {
            encoder,
            head,
            log_std: vec![cfg.init_log_std; ACTION_DIM],
            frames,
            has_refs,
        })
    }

    pub fn history_dim(&self) -> usize {
        self.frames * OBS_DIM
    }

    pub fn input_dim(&self) -> usize {
        self.history_dim() + if self.has_refs { REF_DIM } else { 0 }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.head.num_params() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [self.encoder.params(), self.head.params(), &self.log_std[..]].concat()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim("actor flat parameters", self.num_params(), p.len())?;
        let (a, rest) = p.split_at(self.encoder.num_params());
        let (b, c) = rest.split_at(self.head.num_params());
        self.encoder.params_mut().copy_from_slice(a);
        self.head.params_mut().copy_from_slice(b);
        self.log_std.copy_from_slice(c);
        Ok(())
    }

    fn check_input(&self, input: &ActorInput) -> Result<()> {
        check_dim("actor history", self.history_dim(), input.history.len())?;
        let refs = input.action_ref.is_some() as usize + input.obs_ref.is_some() as usize;
        match (self.has_refs, refs) {
            (true, 2) | (false, 0) => Ok(()),
            _ => Err(Error::DimensionMismatch {
                context: "actor reference slots",
                expected: if self.has_refs { REF_DIM } else { 0 },
                got: input.action_ref.map_or(0, |_| ACTION_DIM)
                    + input.obs_ref.map_or(0, |_| OBS_DIM),
            }),
        }
    }

    /// Batched mean computation; rows of `x` are flattened [`ActorInput`]s.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<ActorCache> {
        check_dim("actor batch input", self.input_dim(), x.ncols())?;
        let hd = self.history_dim();
        let enc = self.encoder.forward_batch(x.slice(s![.., ..hd]))?;
        let latent = enc.output();
        let n = x.nrows();
        let mut head_in = Array2::<f64>::zeros((n, self.head.in_dim()));
        let ld = self.latent_dim();
        head_in.slice_mut(s![.., ..ld]).assign(latent);
        head_in
            .slice_mut(s![.., ld..ld + OBS_DIM])
            .assign(&x.slice(s![.., ..OBS_DIM]));
        if self.has_refs {
            head_in
                .slice_mut(s![.., ld + OBS_DIM..])
                .assign(&x.slice(s![.., hd..]));
        }
        let head = self.head.forward_batch(head_in.view())?;
        Ok(ActorCache { enc, head })
    }

    /// Gradients of the encoder and head given dL/d mean.
    pub fn backward_batch(
        &self,
        cache: &ActorCache,
        d_mean: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (g_head, d_head_in) = self.head.backward_batch(&cache.head, d_mean)?;
        let ld = self.latent_dim();
        let d_latent = d_head_in.slice(s![.., ..ld]);
        let (g_enc, _) = self.encoder.backward_batch(&cache.enc, d_latent)?;
        Ok((g_enc, g_head))
    }

    pub fn mean(&self, input: &ActorInput) -> Result<[f64; ACTION_DIM]> {
        self.check_input(input)?;
        let v = input.to_vec();
        let x = ArrayView2::from_shape((1, v.len()), &v).expect("row vector");
        let c = self.forward_batch(x)?;
        let m = c.mean();
        Ok([m[[0, 0]], m[[0, 1]], m[[0, 2]]])
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        input: &ActorInput,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<PolicyOutput> {
        let mean = self.mean(input)?;
        let log_std = [self.log_std[0], self.log_std[1], self.log_std[2]];
        let sample = if deterministic {
            mean
        } else {
            let mut s = [0.0; ACTION_DIM];
            for i in 0..ACTION_DIM {
                let n: f64 = rng.sample(StandardNormal);
                s[i] = mean[i] + log_std[i].exp() * n;
            }
            s
        };
        Ok(PolicyOutput {
            mean,
            log_std,
            sample,
        })
    }

    /// Log-probabilities of `actions` (rows) under the batch means.
    pub fn log_probs(&self, mean: &Array2<f64>, actions: ArrayView2<'_, f64>) -> Vec<f64> {
        mean.outer_iter()
            .zip(actions.outer_iter())
            .map(|(m, a)| {
                gaussian_log_prob(m.as_slice().unwrap(), &self.log_std, a.to_slice().unwrap())
            })
            .collect()
    }

    /// `-mean_i log pi(a_i | x_i)` and its gradient over all actor parameters.
    pub fn nll_loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(f64, ActorGrads)> {
        check_dim("actor actions", ACTION_DIM, actions.ncols())?;
        let cache = self.forward_batch(x)?;
        let n = x.nrows() as f64;
        let lp = self.log_probs(cache.mean(), actions);
        let loss = -lp.iter().sum::<f64>() / n;
        // d(-lp)/d mean = -(a - mu) / sigma^2
        let mut d_mean = cache.mean().clone();
        let mut d_log_std = vec![0.0; ACTION_DIM];
        for (mut row, a) in d_mean.outer_iter_mut().zip(actions.outer_iter()) {
            for j in 0..ACTION_DIM {
                let var = (2.0 * self.log_std[j]).exp();
                let diff = a[j] - row[j];
                row[j] = -diff / var / n;
                d_log_std[j] += -(diff * diff / var - 1.0) / n;
            }
        }
        let (encoder, head) = self.backward_batch(&cache, d_mean.view())?;
        Ok((
            loss,
            ActorGrads {
                encoder,
                head,
                log_std: d_log_std,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub frames: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let frames = cfg.frames();
        let mut dims = vec![frames * PRIV_DIM];
        dims.extend(&cfg.critic_hidden);
        dims.push(1);
        let net = Mlp::new(&dims, Activation::Elu, Activation::Identity, 1.0, rng)?;
        Ok(Self { net, frames })
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    /// State value of a flattened privileged history.
    pub fn evaluate(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.net.forward(obs)?[0])
    }

    pub fn values(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let c = self.net.forward_batch(x)?;
        Ok(c.output().column(0).to_vec())
    }

    /// `mean_i (V(x_i) - target_i)^2` and its parameter gradient.
    pub fn mse_loss_and_grad(&self, x: ArrayView2<'_, f64>, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim("critic targets", x.nrows(), targets.len())?;
        let c = self.net.forward_batch(x)?;
        let n = targets.len() as f64;
        let out = c.output();
        let mut d = Array2::<f64>::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let e = out[[i, 0]] - t;
            loss += e * e;
            d[[i, 0]] = 2.0 * e / n;
        }
        let (g, _) = self.net.backward_batch(&c, d.view())?;
        Ok((loss / n, g))
    }
}

/// Stacks flattened inputs into a batch matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::<f64>::zeros((rows.len(), cols));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        check_dim("stacked row", cols, src.len())?;
        dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    Ok(m)
}

/// Density of a diagonal Gaussian evaluated from its definition (test oracle).
#[doc(hidden)]
pub fn gaussian_density(mean: &[f64], std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(x)
        .map(|((m, s), x)| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt()))
        .product()
}
