//! Episodic environment.
//!
//! Each step appends one instruction to the attack program. The candidate is
//! first run on every input under the step budget; a non-terminating
//! candidate is thrown away. Otherwise it is committed, measured, checked for
//! a contract violation and rewarded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{generate_inputs, ContractSpec, Input};
use crate::detect::{detect_with, filter_with, SpecFilter, ViolationReport, DEFAULT_BOOSTS_PER_INPUT};
use crate::isa::{build_action_space, ActionSpace, ActionSpaceConfig, IsaError, Program};
use crate::rng::derive_seed;
use crate::uarch::{measure_counted, HTrace, InputObservation, SpecConfig, CACHE_SETS};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("episode finished; call reset before stepping")]
    EpisodeDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub r_leak: f64,
    pub r_observable: f64,
    pub r_misspec: f64,
    pub r_unobservable: f64,
    pub r_none: f64,
    pub r_step: f64,
    pub r_reject: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            r_leak: 100.0,
            r_observable: 10.0,
            r_misspec: 5.0,
            r_unobservable: -5.0,
            r_none: -10.0,
            r_step: -0.1,
            r_reject: -1.0,
        }
    }
}

impl RewardSpec {
    /// Checks `r_leak > r_observable > r_misspec > 0 > r_unobservable >= r_none`.
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.r_leak > self.r_observable
            && self.r_observable > self.r_misspec
            && self.r_misspec > 0.0
            && 0.0 > self.r_unobservable
            && self.r_unobservable >= self.r_none;
        if ok {
            Ok(())
        } else {
            Err("rewards must satisfy r_leak > r_observable > r_misspec > 0 > r_unobservable >= r_none".into())
        }
    }

    /// Non-step part of the reward for a committed instruction.
    pub fn tier(&self, violation: bool, filter: SpecFilter) -> f64 {
        if violation {
            return self.r_leak;
        }
        match filter {
            SpecFilter::Observable => self.r_observable,
            SpecFilter::Misspec => self.r_unobservable,
            SpecFilter::None => self.r_none,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Maximum program length `m`.
    pub max_len: usize,
    pub inputs: usize,
    pub input_seed: u64,
    pub contract: ContractSpec,
    pub spec: SpecConfig,
    pub reward: RewardSpec,
    pub action_space: ActionSpaceConfig,
    pub boosts_per_input: usize,
    /// Regenerate inputs from the episode seed on every reset.
    pub randomize_inputs: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_len: 60,
            inputs: 20,
            input_seed: 0,
            contract: ContractSpec::ct_seq(),
            spec: SpecConfig::default(),
            reward: RewardSpec::default(),
            action_space: ActionSpaceConfig::default(),
            boosts_per_input: DEFAULT_BOOSTS_PER_INPUT,
            randomize_inputs: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_len < 1 {
            return Err(EnvError::Config("max_len must be >= 1".into()));
        }
        if self.inputs < 2 {
            return Err(EnvError::Config("need at least 2 inputs".into()));
        }
        if self.boosts_per_input < 1 {
            return Err(EnvError::Config("boosts_per_input must be >= 1".into()));
        }
        self.contract.validate().map_err(EnvError::Config)?;
        self.reward.validate().map_err(EnvError::Config)?;
        Ok(())
    }
}

/// Observation after a step: `(h, c, b, t)` per input plus the last
/// committed action (`None` before the first one).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub records: Vec<InputObservation>,
    pub last_action: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct StepInfo {
    pub rejected: bool,
    pub violation: Option<ViolationReport>,
    pub filter: Option<SpecFilter>,
    pub program_len: usize,
    /// Simulated instructions spent on this step.
    pub sim_steps: u64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

/// Scales used by [`encode_observation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingDims {
    pub inputs: usize,
    pub space_size: usize,
    pub max_len: usize,
    pub window: usize,
}

impl EncodingDims {
    pub fn len(&self) -> usize {
        self.inputs * (CACHE_SETS + 2) + self.space_size + 1 + self.inputs * self.inputs
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Fixed-length feature vector: per input the 64 probe bits, branch misses
/// over `m` and transient uops over `m * W`; then a one-hot of the last
/// action (the extra last slot is the no-action sentinel); then a one-hot of
/// each input's contract-trace class, classes numbered by first appearance.
pub fn encode_observation(o: &Observation, dims: &EncodingDims) -> Vec<f64> {
    let mut v = Vec::with_capacity(dims.len());
    let m = dims.max_len.max(1) as f64;
    let mw = (dims.max_len * dims.window) as f64;
    for r in &o.records {
        let HTrace(bits) = r.htrace;
        v.extend((0..CACHE_SETS).map(|s| (bits >> s & 1) as f64));
        v.push(r.br_misses as f64 / m);
        v.push(if mw > 0.0 { r.tran_uops as f64 / mw } else { 0.0 });
    }
    let mut onehot = vec![0.0; dims.space_size + 1];
    onehot[o.last_action.unwrap_or(dims.space_size).min(dims.space_size)] = 1.0;
    v.extend(onehot);
    let mut heads: Vec<usize> = Vec::new();
    for (i, r) in o.records.iter().enumerate() {
        let class = match heads.iter().position(|&h| o.records[h].ctrace == r.ctrace) {
            Some(c) => c,
            None => {
                heads.push(i);
                heads.len() - 1
            }
        };
        let mut row = vec![0.0; dims.inputs];
        row[class] = 1.0;
        v.extend(row);
    }
    v
}

pub struct SpecEnv {
    cfg: EnvConfig,
    space: ActionSpace,
    inputs: Vec<Input>,
    program: Program,
    history: Vec<Observation>,
    current: Observation,
    done: bool,
}

impl SpecEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let space = build_action_space(&cfg.action_space)?;
        let inputs = generate_inputs(cfg.input_seed, cfg.inputs).map_err(|e| EnvError::Config(e.to_string()))?;
        let current = Self::empty_observation(&inputs);
        Ok(SpecEnv { cfg, space, inputs, program: Program::default(), history: Vec::new(), current, done: false })
    }

    fn empty_observation(inputs: &[Input]) -> Observation {
        Observation {
            records: inputs
                .iter()
                .map(|_| InputObservation { htrace: HTrace(0), ctrace: Default::default(), br_misses: 0, tran_uops: 0 })
                .collect(),
            last_action: None,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn inputs(&self) -> &[Input] {
        &self.inputs
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    /// Observations of every committed prefix `p_1 .. p_k` this episode.
    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn encoding_dims(&self) -> EncodingDims {
        EncodingDims {
            inputs: self.cfg.inputs,
            space_size: self.space.size(),
            max_len: self.cfg.max_len,
            window: self.cfg.spec.window,
        }
    }

    pub fn encode(&self, o: &Observation) -> Vec<f64> {
        encode_observation(o, &self.encoding_dims())
    }

    /// Starts a new episode with an empty program. Inputs stay fixed across
    /// episodes unless `randomize_inputs` is set, in which case they are
    /// regenerated from `seed`.
    pub fn reset(&mut self, seed: u64) -> Observation {
        if self.cfg.randomize_inputs {
            self.inputs = generate_inputs(derive_seed(self.cfg.input_seed, &[seed]), self.cfg.inputs)
                .expect("input count validated");
        }
        self.program = Program::default();
        self.history.clear();
        self.current = Self::empty_observation(&self.inputs);
        self.done = false;
        self.current.clone()
    }

    pub fn step(&mut self, action_id: usize) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let r = self.cfg.reward;
        let candidate = self.program.append_action(action_id, &self.space)?;
        let m = match measure_counted(&candidate, &self.inputs, &self.cfg.contract, &self.cfg.spec) {
            Ok(m) => m,
            Err(sim_steps) => {
                return Ok(StepResult {
                    obs: self.current.clone(),
                    reward: r.r_reject + r.r_step,
                    terminated: false,
                    truncated: false,
                    info: StepInfo { rejected: true, program_len: self.program.len(), sim_steps, ..Default::default() },
                })
            }
        };
        let mut sim_steps = m.sim_steps;
        let det = detect_with(
            &candidate,
            &self.inputs,
            &m,
            &self.cfg.contract,
            &self.cfg.spec,
            self.cfg.boosts_per_input,
            false,
        );
        let (violation, filter) = match det {
            Ok(d) => {
                sim_steps += d.sim_steps;
                let (f, steps) = filter_with(&candidate, &self.inputs, &m.records, &self.cfg.spec)
                    .unwrap_or((SpecFilter::None, 0));
                sim_steps += steps;
                (d.reports.into_iter().next(), f)
            }
            // Siblings share the base's architectural path, so this only
            // happens if the hardware run diverges from it.
            Err(_) => (None, SpecFilter::None),
        };

        self.program = candidate;
        let obs = Observation { records: m.records, last_action: Some(action_id) };
        self.history.push(obs.clone());
        self.current = obs.clone();
        let terminated = violation.is_some();
        let truncated = self.program.len() >= self.cfg.max_len;
        self.done = terminated || truncated;
        Ok(StepResult {
            obs,
            reward: r.r_step + r.tier(terminated, filter),
            terminated,
            truncated,
            info: StepInfo {
                rejected: false,
                violation,
                filter: Some(filter),
                program_len: self.program.len(),
                sim_steps,
            },
        })
    }
}
