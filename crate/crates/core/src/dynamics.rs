//! Probabilistic one-step dynamics model, sigma statistics and the
//! uncertainty-gated reference adjustment.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ObservationFrame, ACTION_DIM, OBS_DIM};
use crate::error::{check_dim, Error, Result};
use crate::nn::{sigmoid, softplus, Activation, ForwardCache, Mlp};

pub const MODEL_IN: usize = OBS_DIM + ACTION_DIM;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// How the per-dimension sigma vector is reduced to one number in the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaAggregate {
    #[default]
    Mean,
    Max,
}

impl SigmaAggregate {
    pub fn reduce(self, sigma: &[f64]) -> f64 {
        match self {
            Self::Mean => sigma.iter().sum::<f64>() / sigma.len() as f64,
            Self::Max => sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DynModelConfig {
    pub hidden: Vec<usize>,
    pub sigma_floor: f64,
    /// Adds `o_t` to the mean head so the network learns the increment.
    pub persistence_skip: bool,
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub probe_aggregate: SigmaAggregate,
}

impl Default for DynModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            sigma_floor: 1e-4,
            persistence_skip: true,
            lr: 1e-3,
            epochs: 2,
            minibatches: 4,
            probe_aggregate: SigmaAggregate::Mean,
        }
    }
}

impl DynModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("dynamics.hidden needs at least one width > 0".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("dynamics.sigma_floor must be > 0".into()));
        }
        if !(self.lr > 0.0) || self.minibatches == 0 {
            return Err(Error::Config("dynamics.lr and dynamics.minibatches must be > 0".into()));
        }
        Ok(())
    }
}

/// Shared trunk with a mean head and a softplus sigma head.
#[derive(Debug, Clone, PartialEq)]
pub struct DynModel {
    pub trunk: Mlp,
    pub mu_head: Mlp,
    pub sigma_head: Mlp,
    pub sigma_floor: f64,
    pub persistence_skip: bool,
}

#[derive(Debug, Clone)]
pub struct DynCache {
    trunk: ForwardCache,
    mu: ForwardCache,
    sigma_pre: ForwardCache,
}

impl DynCache {
    pub fn sigma_pre(&self) -> &Array2<f64> {
        self.sigma_pre.output()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynGrads {
    pub trunk: Vec<f64>,
    pub mu_head: Vec<f64>,
    pub sigma_head: Vec<f64>,
}

impl DynGrads {
    pub fn flatten(&self) -> Vec<f64> {
        [&self.trunk[..], &self.mu_head[..], &self.sigma_head[..]].concat()
    }
}

impl DynModel {
    pub fn new<R: Rng + ?Sized>(cfg: &DynModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![MODEL_IN];
        dims.extend(&cfg.hidden);
        let trunk = Mlp::new(
            &dims,
            Activation::Elu,
            Activation::Elu,
            std::f64::consts::SQRT_2,
            rng,
        )?;
        let feat = *cfg.hidden.last().unwrap();
        let mu_head = Mlp::new(&[feat, OBS_DIM], Activation::Identity, Activation::Identity, 0.1, rng)?;
        let sigma_head = Mlp::new(
            &[feat, OBS_DIM],
            Activation::Identity,
            Activation::Identity,
            0.1,
            rng,
        )?;
        Ok(Self {
            trunk,
            mu_head,
            sigma_head,
            sigma_floor: cfg.sigma_floor,
            persistence_skip: cfg.persistence_skip,
        })
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.mu_head.num_params() + self.sigma_head.num_params()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [self.trunk.params(), self.mu_head.params(), self.sigma_head.params()].concat()
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim("dynamics flat parameters", self.num_params(), p.len())?;
        let (a, rest) = p.split_at(self.trunk.num_params());
        let (b, c) = rest.split_at(self.mu_head.num_params());
        self.trunk.params_mut().copy_from_slice(a);
        self.mu_head.params_mut().copy_from_slice(b);
        self.sigma_head.params_mut().copy_from_slice(c);
        Ok(())
    }

    fn sigma_of(&self, z: f64) -> f64 {
        softplus(z) + self.sigma_floor
    }

    /// Batched forward pass; rows of `x` are `[o_t, a_t]`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>, DynCache)> {
        check_dim("dynamics input", MODEL_IN, x.ncols())?;
        let trunk = self.trunk.forward_batch(x)?;
        let mu = self.mu_head.forward_batch(trunk.output().view())?;
        let sigma_pre = self.sigma_head.forward_batch(trunk.output().view())?;
        let mut mean = mu.output().clone();
        if self.persistence_skip {
            mean += &x.slice(s![.., ..OBS_DIM]);
        }
        let sigma = sigma_pre.output().mapv(|z| self.sigma_of(z));
        let cache = DynCache {
            trunk,
            mu,
            sigma_pre,
        };
        Ok((mean, sigma, cache))
    }

    pub fn predict(&self, obs: &ObservationFrame, action: &[f64]) -> Result<([f64; OBS_DIM], [f64; OBS_DIM])> {
        check_dim("dynamics action", ACTION_DIM, action.len())?;
        let mut row = [0.0; MODEL_IN];
        row[..OBS_DIM].copy_from_slice(&obs.0);
        row[OBS_DIM..].copy_from_slice(action);
        let x = ArrayView2::from_shape((1, MODEL_IN), &row).expect("row vector");
        let (m, sg, _) = self.forward_batch(x)?;
        let mut mu = [0.0; OBS_DIM];
        let mut sigma = [0.0; OBS_DIM];
        for i in 0..OBS_DIM {
            mu[i] = m[[0, i]];
            sigma[i] = sg[[0, i]];
        }
        Ok((mu, sigma))
    }

    /// Mean Gaussian NLL over the batch and its parameter gradient.
    pub fn nll_loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
    ) -> Result<(f64, DynGrads)> {
        check_dim("dynamics targets", OBS_DIM, targets.ncols())?;
        check_dim("dynamics target rows", x.nrows(), targets.nrows())?;
        let (mu, sigma, cache) = self.forward_batch(x)?;
        let n = x.nrows() as f64;
        let mut loss = 0.0;
        let mut d_mu = Array2::<f64>::zeros(mu.raw_dim());
        let mut d_pre = Array2::<f64>::zeros(mu.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..OBS_DIM {
                let (m, sg, t) = (mu[[i, j]], sigma[[i, j]], targets[[i, j]]);
                let (l, gm, gs) = nll_terms(m, sg, t);
                loss += l;
                d_mu[[i, j]] = gm / n;
                d_pre[[i, j]] = gs * sigmoid(cache.sigma_pre()[[i, j]]) / n;
            }
        }
        let (g_mu, dh_mu) = self.mu_head.backward_batch(&cache.mu, d_mu.view())?;
        let (g_sig, dh_sig) = self.sigma_head.backward_batch(&cache.sigma_pre, d_pre.view())?;
        let dh = dh_mu + dh_sig;
        let (g_trunk, _) = self.trunk.backward_batch(&cache.trunk, dh.view())?;
        Ok((
            loss / n,
            DynGrads {
                trunk: g_trunk,
                mu_head: g_mu,
                sigma_head: g_sig,
            },
        ))
    }
}

/// Loss and partial derivatives (d/dmu, d/dsigma) of one Gaussian NLL term.
fn nll_terms(mu: f64, sigma: f64, x: f64) -> (f64, f64, f64) {
    let r = x - mu;
    let inv = 1.0 / sigma;
    let l = 0.5 * r * r * inv * inv + sigma.ln() + HALF_LOG_2PI;
    (l, -r * inv * inv, -r * r * inv * inv * inv + inv)
}

/// Gaussian negative log-likelihood summed over dimensions.
pub fn nll_loss(mu: &[f64], sigma: &[f64], target: &[f64]) -> Result<f64> {
    check_dim("nll sigma", mu.len(), sigma.len())?;
    check_dim("nll target", mu.len(), target.len())?;
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {s}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(target)
        .map(|((m, s), x)| nll_terms(*m, *s, *x).0)
        .sum())
}

/// Per-dimension running min/max of predicted sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaStats {
    pub min: [f64; OBS_DIM],
    pub max: [f64; OBS_DIM],
    pub count: u64,
}

impl Default for SigmaStats {
    fn default() -> Self {
        Self {
            min: [f64::INFINITY; OBS_DIM],
            max: [f64::NEG_INFINITY; OBS_DIM],
            count: 0,
        }
    }
}

impl SigmaStats {
    pub fn is_populated(&self) -> bool {
        self.count > 0
    }

    /// Folds a batch of sigma rows into the running extremes.
    pub fn update(&mut self, batch: ArrayView2<'_, f64>) -> Result<()> {
        check_dim("sigma batch", OBS_DIM, batch.ncols())?;
        if batch.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("sigma batch must be finite and > 0".into()));
        }
        for row in batch.outer_iter() {
            for j in 0..OBS_DIM {
                self.min[j] = self.min[j].min(row[j]);
                self.max[j] = self.max[j].max(row[j]);
            }
        }
        self.count += batch.nrows() as u64;
        Ok(())
    }

    /// `clamp((sigma - min) / (max - min), 0, 1)`, zero on collapsed ranges.
    pub fn normalize(&self, sigma: &[f64]) -> Result<[f64; OBS_DIM]> {
        if !self.is_populated() {
            return Err(Error::UnpopulatedStats);
        }
        check_dim("sigma", OBS_DIM, sigma.len())?;
        let mut n = [0.0; OBS_DIM];
        for j in 0..OBS_DIM {
            let span = self.max[j] - self.min[j];
            n[j] = if span > 0.0 {
                ((sigma[j] - self.min[j]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Ok(n)
    }
}

pub fn update_sigma_stats(stats: &SigmaStats, batch: ArrayView2<'_, f64>) -> Result<SigmaStats> {
    let mut s = stats.clone();
    s.update(batch)?;
    Ok(s)
}

/// Observation reference `(1 - norm(sigma)) * mu`.
pub fn adjust(mu: &[f64], sigma: &[f64], stats: &SigmaStats) -> Result<[f64; OBS_DIM]> {
    check_dim("adjust mu", OBS_DIM, mu.len())?;
    let n = stats.normalize(sigma)?;
    let mut out = [0.0; OBS_DIM];
    for j in 0..OBS_DIM {
        out[j] = (1.0 - n[j]) * mu[j];
    }
    Ok(out)
}

/// One recorded step: the model input and the observation that followed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStep {
    pub obs: ObservationFrame,
    pub action: [f64; ACTION_DIM],
    pub next_obs: ObservationFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSeries {
    pub sigma: Vec<f64>,
    pub error: Vec<f64>,
    pub onset: usize,
}

impl ProbeSeries {
    pub fn pre_onset_error(&self) -> f64 {
        mean(&self.error[..self.onset])
    }

    pub fn post_onset_error(&self) -> f64 {
        mean(&self.error[self.onset..])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-step aggregated sigma and `||o_{t+1} - mu_t||_2` along a trajectory.
pub fn sigma_error_probe(
    model: &DynModel,
    trajectory: &[ProbeStep],
    onset: usize,
    aggregate: SigmaAggregate,
) -> Result<ProbeSeries> {
    if trajectory.len() <= onset {
        return Err(Error::TrajectoryTooShort {
            len: trajectory.len(),
            onset,
        });
    }
    let mut x = Array2::<f64>::zeros((trajectory.len(), MODEL_IN));
    for (i, st) in trajectory.iter().enumerate() {
        for j in 0..OBS_DIM {
            x[[i, j]] = st.obs.0[j];
        }
        for j in 0..ACTION_DIM {
            x[[i, OBS_DIM + j]] = st.action[j];
        }
    }
    let (mu, sigma, _) = model.forward_batch(x.view())?;
    let mut sig = Vec::with_capacity(trajectory.len());
    let mut err = Vec::with_capacity(trajectory.len());
    for (i, st) in trajectory.iter().enumerate() {
        sig.push(aggregate.reduce(sigma.row(i).as_slice().unwrap()));
        let e: f64 = (0..OBS_DIM)
            .map(|j| (st.next_obs.0[j] - mu[[i, j]]).powi(2))
            .sum();
        err.push(e.sqrt());
    }
    Ok(ProbeSeries {
        sigma: sig,
        error: err,
        onset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Value(f64),
    /// One of the series has zero variance.
    Degenerate,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(r) => Some(r),
            Self::Degenerate => None,
        }
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_dim("pearson series", a.len(), b.len())?;
    if a.len() < 2 {
        return Ok(Correlation::Degenerate);
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}
