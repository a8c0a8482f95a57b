//! PPO with the clipped surrogate objective, GAE and plain gradient descent.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::Mlp;
use super::{AgentError, OptimizerKind, TrainerConfig};

pub const ADV_STD_FLOOR: f64 = 1e-8;

/// Policy and value networks. The policy maps an observation to action
/// logits, the value network to a scalar. Parameters are flattened policy
/// first, then value (see [`Mlp`] for the per-network layout).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub policy: Mlp,
    pub value: Mlp,
}

impl PolicyParams {
    /// Hidden layers scaled-uniform, policy output layer zero so the initial
    /// policy is uniform.
    pub fn init<R: Rng>(input_dim: usize, hidden: &[usize], actions: usize, rng: &mut R) -> Self {
        let mut p_sizes = vec![input_dim];
        p_sizes.extend_from_slice(hidden);
        let mut v_sizes = p_sizes.clone();
        p_sizes.push(actions);
        v_sizes.push(1);
        PolicyParams { policy: Mlp::init(&p_sizes, true, rng), value: Mlp::init(&v_sizes, false, rng) }
    }

    pub fn len(&self) -> usize {
        self.policy.params().len() + self.value.params().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.policy.params().to_vec();
        v.extend_from_slice(self.value.params());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let np = self.policy.params().len();
        self.policy.params_mut().copy_from_slice(&flat[..np]);
        self.value.params_mut().copy_from_slice(&flat[np..]);
    }

    pub fn is_finite(&self) -> bool {
        self.policy.params().iter().chain(self.value.params()).all(|p| p.is_finite())
    }

    pub fn action_dim(&self) -> usize {
        self.policy.output_dim()
    }

    pub fn value_of(&self, obs: &[f64]) -> f64 {
        self.value.forward(obs).output[0]
    }

    /// Action distribution at `obs`.
    pub fn probabilities(&self, obs: &[f64]) -> Result<Vec<f64>, AgentError> {
        let logits = self.policy.forward(obs).output;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(AgentError::NonFinite("policy logits".into()));
        }
        Ok(softmax(&logits))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Inverse-CDF draw from a categorical distribution; one uniform per call.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples an action. Returns `(action, log_prob, value)`.
pub fn select_action<R: Rng>(
    params: &PolicyParams,
    obs: &[f64],
    rng: &mut R,
) -> Result<(usize, f64, f64), AgentError> {
    if obs.len() != params.policy.input_dim() {
        return Err(AgentError::Dimension { expected: params.policy.input_dim(), got: obs.len() });
    }
    let probs = params.probabilities(obs)?;
    let a = sample_categorical(&probs, rng);
    Ok((a, probs[a].ln(), params.value_of(obs)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Value of the observation reached on truncation, used to bootstrap.
    pub truncation_value: f64,
}

/// A contiguous rollout with its advantages and returns.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    /// Fills `advantages` and `returns`; `last_value` bootstraps a rollout
    /// that was cut mid-episode.
    pub fn finish(&mut self, last_value: f64, gamma: f64, lambda: f64) {
        let (adv, ret) = compute_gae(&self.steps, last_value, gamma, lambda);
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Generalized advantage estimation over a rollout that may span several
/// episodes. Returns `(advantages, returns)` with `returns = advantages +
/// values`.
pub fn compute_gae(steps: &[Transition], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = steps.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let s = &steps[t];
        let episode_end = s.terminated || s.truncated;
        let next_value = if s.terminated {
            0.0
        } else if s.truncated {
            s.truncation_value
        } else if t + 1 == n {
            last_value
        } else {
            steps[t + 1].value
        };
        let delta = s.reward + gamma * next_value - s.value;
        let carry = if episode_end || t + 1 == n { 0.0 } else { gae };
        gae = delta + gamma * lambda * carry;
        adv[t] = gae;
    }
    let ret = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

/// One training sample after advantage normalization.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss coefficients used by [`loss_and_grad`].
#[derive(Debug, Clone, Copy)]
pub struct LossCoefs {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&TrainerConfig> for LossCoefs {
    fn from(c: &TrainerConfig) -> Self {
        LossCoefs { clip: c.clip, value_coef: c.value_coef, entropy_coef: c.entropy_coef }
    }
}

/// Mean minibatch loss
/// `-min(r A, clip(r, 1-e, 1+e) A) + c_v (V - R)^2 - c_e H`
/// and its gradient, accumulated into `grad` (flat layout of
/// [`PolicyParams::flat`]).
pub fn loss_and_grad(params: &PolicyParams, batch: &[Sample], coefs: LossCoefs, grad: &mut [f64]) -> LossStats {
    let np = params.policy.params().len();
    let (gp, gv) = grad.split_at_mut(np);
    let inv = 1.0 / batch.len() as f64;
    let mut stats = LossStats::default();
    for s in batch {
        let pf = params.policy.forward(s.obs);
        let probs = softmax(&pf.output);
        let logp = probs[s.action].ln();
        let ratio = (logp - s.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - coefs.clip, 1.0 + coefs.clip);
        let unclipped_obj = ratio * s.advantage;
        let clipped_obj = clipped * s.advantage;
        let surrogate = unclipped_obj.min(clipped_obj);
        if s.advantage > 0.0 && ratio > 1.0 + coefs.clip {
            debug_assert!(surrogate <= unclipped_obj);
        }
        let h = entropy(&probs);

        // d(-surrogate)/d logp: the unclipped branch is active when it is the
        // minimum or the ratio lies inside the clip range.
        let in_range = ratio >= 1.0 - coefs.clip && ratio <= 1.0 + coefs.clip;
        let d_logp = if unclipped_obj <= clipped_obj || in_range { -unclipped_obj } else { 0.0 };
        let d_logits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| {
                let onehot = if j == s.action { 1.0 } else { 0.0 };
                let d_surr = d_logp * (onehot - pj);
                // dH/dz_j = -p_j (ln p_j + H)
                let d_ent = -pj * (pj.ln() + h);
                inv * (d_surr - coefs.entropy_coef * d_ent)
            })
            .collect();
        params.policy.backward(s.obs, &pf, &d_logits, gp);

        let vf = params.value.forward(s.obs);
        let v = vf.output[0];
        let err = v - s.ret;
        params.value.backward(s.obs, &vf, &[inv * 2.0 * coefs.value_coef * err], gv);

        stats.policy_loss -= inv * surrogate;
        stats.value_loss += inv * err * err;
        stats.entropy += inv * h;
        stats.clip_fraction += inv * ((ratio - 1.0).abs() > coefs.clip) as u8 as f64;
        stats.approx_kl += inv * (s.old_log_prob - logp);
    }
    stats.total = stats.policy_loss + coefs.value_coef * stats.value_loss - coefs.entropy_coef * stats.entropy;
    stats
}

/// Optimizer state across updates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Optimizer { kind, lr, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Normalizes advantages across the whole batch (mean 0, std 1, std floored).
pub fn normalized_advantages(batch: &[Trajectory]) -> Vec<f64> {
    let all: Vec<f64> = batch.iter().flat_map(|t| t.advantages.iter().copied()).collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(ADV_STD_FLOOR);
    all.into_iter().map(|a| (a - mean) / std).collect()
}

/// Runs `cfg.epochs` passes of shuffled minibatch descent on `batch`.
/// Returns the updated parameters and the mean loss statistics.
pub fn ppo_update<R: Rng>(
    params: &PolicyParams,
    batch: &[Trajectory],
    cfg: &TrainerConfig,
    opt: &mut Optimizer,
    rng: &mut R,
) -> Result<(PolicyParams, LossStats), AgentError> {
    let advantages = normalized_advantages(batch);
    let samples: Vec<Sample> = batch
        .iter()
        .flat_map(|t| t.steps.iter().zip(&t.returns))
        .zip(&advantages)
        .map(|((s, &ret), &advantage)| Sample {
            obs: &s.obs,
            action: s.action,
            old_log_prob: s.log_prob,
            advantage,
            ret,
        })
        .collect();
    if samples.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut params = params.clone();
    let mut flat = params.flat();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut mean = LossStats::default();
    let mut batches = 0usize;
    let coefs = LossCoefs::from(cfg);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let mb: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut grad = vec![0.0; flat.len()];
            let stats = loss_and_grad(&params, &mb, coefs, &mut grad);
            if !stats.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(AgentError::NonFinite("loss".into()));
            }
            opt.step(&mut flat, &grad);
            params.set_flat(&flat);
            mean.policy_loss += stats.policy_loss;
            mean.value_loss += stats.value_loss;
            mean.entropy += stats.entropy;
            mean.total += stats.total;
            mean.clip_fraction += stats.clip_fraction;
            mean.approx_kl += stats.approx_kl;
            batches += 1;
        }
    }
    let k = batches.max(1) as f64;
    mean.policy_loss /= k;
    mean.value_loss /= k;
    mean.entropy /= k;
    mean.total /= k;
    mean.clip_fraction /= k;
    mean.approx_kl /= k;
    if !params.is_finite() {
        return Err(AgentError::NonFinite("parameters".into()));
    }
    Ok((params, mean))
}
