//! PPO learner and the uniform random-search baseline.
//!
//! Both drivers share one rollout loop and the same random streams derived
//! from the seed: `[0]` parameter init, `[1]` action sampling, `[2]`
//! minibatch shuffling, `[3, k]` the reset seed of episode `k`. A policy with
//! a zero output layer is exactly uniform, so until its first update the
//! PPO agent takes the same actions as random search with the same seed.

pub mod net;
pub mod ppo;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{ReportRecord, ViolationReport};
use crate::env::{EnvError, SpecEnv};
use crate::rng::{chacha, derive_seed};

pub use ppo::{
    compute_gae, loss_and_grad, ppo_update, sample_categorical, select_action, LossCoefs, LossStats, Optimizer,
    PolicyParams, Sample, Trajectory, Transition,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("observation has {got} features, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training fault at iteration {iteration}: {source}")]
    Fault {
        iteration: usize,
        #[source]
        source: Box<AgentError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Env steps collected per update.
    pub horizon: usize,
    /// Total env steps.
    pub total_steps: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// End the run at the end of the step that finds the first leak.
    pub stop_at_first_leak: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 4,
            minibatch: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            horizon: 512,
            total_steps: 200_000,
            seed: 0,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::Sgd,
            stop_at_first_leak: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip must be > 0");
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("lr must be a positive number");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.horizon == 0 {
            return bad("epochs, minibatch and horizon must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Env steps taken so far.
    pub steps: u64,
    /// Simulator instruction issues so far.
    pub sim_steps: u64,
    pub episodes: u64,
    /// Mean return of the episodes finished this iteration.
    pub mean_episode_reward: Option<f64>,
    /// Distinct leaking programs found so far.
    pub leaks_found: usize,
    pub first_leak_step: Option<u64>,
    pub losses: Option<LossStats>,
}

/// A distinct leaking program and how often it was hit.
#[derive(Debug, Clone)]
pub struct Leak {
    pub program: String,
    pub count: u64,
    pub first_step: u64,
    pub report: ViolationReport,
}

#[derive(Debug, Clone, Serialize)]
struct LeakFile<'a> {
    program: &'a str,
    count: u64,
    first_step: u64,
    report: ReportRecord,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub iterations: Vec<IterationRecord>,
    /// In order of discovery.
    pub leaks: Vec<Leak>,
    pub first_leak_step: Option<u64>,
    pub steps: u64,
    pub sim_steps: u64,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for it in &self.iterations {
            s.push_str(&serde_json::to_string(it).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    /// Writes `<name>.jsonl` into `dir` and one `.json`/`.asm` pair per
    /// leak into `dir/leaks`.
    pub fn write_to(&self, dir: &Path, name: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::File::create(dir.join(format!("{name}.jsonl")))?.write_all(self.to_jsonl().as_bytes())?;
        if self.leaks.is_empty() {
            return Ok(());
        }
        let leaks = dir.join("leaks");
        fs::create_dir_all(&leaks)?;
        for (i, l) in self.leaks.iter().enumerate() {
            let file = LeakFile { program: &l.program, count: l.count, first_step: l.first_step, report: l.report.to_record() };
            let json = serde_json::to_string_pretty(&file).expect("leak serializes");
            fs::write(leaks.join(format!("{name}_{i:04}.json")), json + "\n")?;
            fs::write(leaks.join(format!("{name}_{i:04}.asm")), format!("{}\n", l.program))?;
        }
        Ok(())
    }
}

/// Trains a PPO agent on `env`.
pub fn train(env: &mut SpecEnv, cfg: &TrainerConfig) -> Result<TrainingLog, AgentError> {
    cfg.validate()?;
    run_loop(env, cfg, true)
}

/// Same loop as [`train`] with uniformly sampled actions and no updates.
pub fn random_search(env: &mut SpecEnv, budget: u64, seed: u64) -> Result<TrainingLog, AgentError> {
    let cfg = TrainerConfig { total_steps: budget, seed, ..TrainerConfig::default() };
    run_loop(env, &cfg, false)
}

/// [`random_search`] with the horizon and early stop taken from `cfg`.
pub fn random_search_with(env: &mut SpecEnv, cfg: &TrainerConfig) -> Result<TrainingLog, AgentError> {
    cfg.validate()?;
    run_loop(env, cfg, false)
}

fn run_loop(env: &mut SpecEnv, cfg: &TrainerConfig, learn: bool) -> Result<TrainingLog, AgentError> {
    let actions = env.action_space().size();
    let dim = env.encoding_dims().len();
    let mut params = PolicyParams::init(dim, &cfg.hidden, actions, &mut chacha(derive_seed(cfg.seed, &[0])));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.len());
    let mut sample_rng = chacha(derive_seed(cfg.seed, &[1]));
    let mut shuffle_rng = chacha(derive_seed(cfg.seed, &[2]));
    let uniform = vec![1.0 / actions as f64; actions];

    let mut log = TrainingLog::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut episode = 0u64;
    let first = env.reset(derive_seed(cfg.seed, &[3, episode]));
    let mut obs = env.encode(&first);
    let mut ep_reward = 0.0;
    let mut iteration = 0usize;
    let fault = |iteration: usize| move |e: AgentError| AgentError::Fault { iteration, source: Box::new(e) };

    while log.steps < cfg.total_steps {
        let horizon = (cfg.horizon as u64).min(cfg.total_steps - log.steps);
        let mut traj = Trajectory::default();
        let mut finished = Vec::new();
        let mut stop = false;
        for _ in 0..horizon {
            let (action, log_prob, value) = if learn {
                select_action(&params, &obs, &mut sample_rng).map_err(fault(iteration))?
            } else {
                let a = sample_categorical(&uniform, &mut sample_rng);
                (a, uniform[a].ln(), 0.0)
            };
            let res = env.step(action)?;
            log.steps += 1;
            log.sim_steps += res.info.sim_steps;
            ep_reward += res.reward;
            if let Some(report) = res.info.violation {
                let text = report.program.render();
                match seen.get(&text) {
                    Some(&i) => log.leaks[i].count += 1,
                    None => {
                        seen.insert(text.clone(), log.leaks.len());
                        log.leaks.push(Leak { program: text, count: 1, first_step: log.steps, report });
                    }
                }
                log.first_leak_step.get_or_insert(log.steps);
                stop = cfg.stop_at_first_leak;
            }
            let next = env.encode(&res.obs);
            let truncation_value = if learn && res.truncated && !res.terminated { params.value_of(&next) } else { 0.0 };
            traj.steps.push(Transition {
                obs: std::mem::replace(&mut obs, next),
                action,
                log_prob,
                reward: res.reward,
                value,
                terminated: res.terminated,
                truncated: res.truncated,
                truncation_value,
            });
            if res.terminated || res.truncated {
                finished.push(ep_reward);
                ep_reward = 0.0;
                episode += 1;
                let o = env.reset(derive_seed(cfg.seed, &[3, episode]));
                obs = env.encode(&o);
            }
            if stop {
                break;
            }
        }

        let losses = if learn && !stop {
            let last_value = params.value_of(&obs);
            traj.finish(last_value, cfg.gamma, cfg.lambda);
            let (p, stats) = ppo_update(&params, std::slice::from_ref(&traj), cfg, &mut opt, &mut shuffle_rng)
                .map_err(fault(iteration))?;
            params = p;
            Some(stats)
        } else {
            None
        };
        log.iterations.push(IterationRecord {
            iteration,
            steps: log.steps,
            sim_steps: log.sim_steps,
            episodes: episode,
            mean_episode_reward: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            leaks_found: log.leaks.len(),
            first_leak_step: log.first_leak_step,
            losses,
        });
        iteration += 1;
        if stop {
            break;
        }
    }
    Ok(log)
}
