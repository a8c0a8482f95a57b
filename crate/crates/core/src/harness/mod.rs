//! Experiment orchestration: the random fuzzer, the program-size scaling
//! study, the planted fixture, experiment configs and the CLI.

mod cli;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{self, AgentError, TrainerConfig};
use crate::arch::{generate_inputs, ContractSpec, Input};
use crate::detect::detect_with;
use crate::env::{EnvConfig, EnvError, SpecEnv};
use crate::isa::{build_action_space, ActionSpace, ActionSpaceConfig, Instruction, Program};
use crate::rng::{chacha, derive_seed};
use crate::uarch::{measure_counted, SpecConfig};

pub use cli::run_cli;

/// Source of the planted Spectre-V1 gadget.
///
/// ```text
/// SBB R0, R0          ; R0 = 0, SF = 0
/// JNS +2              ; taken; its PHT entry resets to weakly not-taken
/// SBB R1, [BASE+R2]   ; skipped, but loaded transiently from set (R2 >> 6) & 63
/// ```
///
/// Architecturally every input runs the same path, so under CT-SEQ all
/// inputs share one contract trace while the transient load touches a set
/// chosen by R2. With no speculation window nothing touches the cache. CT-COND
/// exposes the not-taken path, so the load address joins the contract trace
/// and inputs with different sets land in different classes.
pub const PLANTED_SOURCE: &str = "SBB R0, R0\nJNS +2\nSBB R1, [BASE+R2]";

const FIXTURE_ACTIONS: [&str; 6] = ["SBB R0, R0", "JNS +2", "SBB R1, [BASE+R2]", "JNS -2", "JMP +2", "JMP -2"];

/// The planted leak and an environment over [`fixture_action_space`].
pub fn planted_fixture() -> (Program, EnvConfig) {
    let p = PLANTED_SOURCE.parse().expect("fixture parses");
    let cfg = EnvConfig { action_space: fixture_action_space(), ..EnvConfig::default() };
    (p, cfg)
}

/// The fixture's three instructions plus the remaining branch forms.
pub fn fixture_action_space() -> ActionSpaceConfig {
    ActionSpaceConfig::explicit(FIXTURE_ACTIONS.iter().map(|s| s.parse::<Instruction>().expect("valid")).collect())
}

/// Draws `n` actions uniformly with replacement.
pub fn random_program<R: Rng>(n: usize, space: &ActionSpace, rng: &mut R) -> Program {
    (0..n).map(|_| space.actions()[rng.random_range(0..space.size())]).collect()
}

/// Expected programs tested before a leak for action-space size `a`,
/// program size `n` and leak length `l`: `a^(n-1) / (n - l + 1)`. `None`
/// when no leak fits.
pub fn expected_fuzz_count(a: usize, n: usize, l: usize) -> Option<f64> {
    if n < l || n == 0 {
        return None;
    }
    Some((a as f64).powi(n as i32 - 1) / (n - l + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Fuzz,
    Detect,
    Simulate,
    Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fuzz,
    Rl,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fuzz => "fuzz",
            Method::Rl => "rl",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Master seed. [`ExperimentConfig::resolve`] copies it into the input
    /// and trainer seeds.
    pub seed: u64,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    /// Program sizes `n` for fuzzing, maximum lengths `m` for the agent.
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Programs per fuzz trial before censoring.
    pub fuzz_budget: u64,
    /// Env steps per agent trial in the scaling study.
    pub rl_budget: u64,
    /// Reference leak length for the expected-count formula.
    pub leak_len: usize,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Train,
            seed: 0,
            env: EnvConfig::default(),
            trainer: TrainerConfig::default(),
            sizes: vec![4, 8, 16, 32],
            trials: 5,
            fuzz_budget: 100_000,
            rl_budget: 200_000,
            leak_len: 2,
            methods: vec![Method::Fuzz, Method::Rl],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Pins derived seeds so the written config is complete.
    pub fn resolve(&mut self) {
        self.env.input_seed = self.seed;
        self.trainer.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), String> {
        self.env.validate().map_err(|e| e.to_string())?;
        self.trainer.validate().map_err(|e| e.to_string())?;
        build_action_space(&self.env.action_space).map_err(|e| e.to_string())?;
        if self.sizes.contains(&0) {
            return Err("program sizes must be >= 1".into());
        }
        if self.trials == 0 {
            return Err("trials must be >= 1".into());
        }
        Ok(())
    }
}

/// One grid cell of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub n: usize,
    pub trial: usize,
    /// Programs (fuzzer) or env steps (agent) up to and including the first
    /// leak; the budget when censored.
    pub programs_tested: u64,
    pub wall_steps: u64,
    pub censored: bool,
}

pub const CSV_HEADER: &str = "method,n,trial,programs_tested,wall_steps,censored";

pub fn to_csv(rows: &[TrialRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.method.name(), r.n, r.trial, r.programs_tested, r.wall_steps, r.censored);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzStats {
    pub method: Method,
    pub n: usize,
    pub trials: usize,
    pub programs_tested: Vec<u64>,
    pub censored: Vec<bool>,
    pub wall_steps: Vec<u64>,
    /// Censored trials count at the budget value.
    pub median: f64,
    pub mean: f64,
    pub action_space_size: usize,
    pub leak_len: usize,
    /// Formula estimate; fuzzer rows only.
    pub expected: Option<f64>,
}

impl FuzzStats {
    pub fn from_trials(method: Method, n: usize, rows: &[TrialRecord], a: usize, l: usize) -> Self {
        let programs_tested: Vec<u64> = rows.iter().map(|r| r.programs_tested).collect();
        let vals: Vec<f64> = programs_tested.iter().map(|&v| v as f64).collect();
        FuzzStats {
            method,
            n,
            trials: rows.len(),
            censored: rows.iter().map(|r| r.censored).collect(),
            wall_steps: rows.iter().map(|r| r.wall_steps).collect(),
            median: median(&vals),
            mean: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
            programs_tested,
            action_space_size: a,
            leak_len: l,
            expected: if method == Method::Fuzz { expected_fuzz_count(a, n, l) } else { None },
        }
    }

    pub fn uncensored(&self) -> usize {
        self.censored.iter().filter(|c| !**c).count()
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        (s[k / 2 - 1] + s[k / 2]) / 2.0
    }
}

fn inputs_for(env: &EnvConfig) -> Vec<Input> {
    generate_inputs(env.input_seed, env.inputs).expect("input count validated")
}

/// Tests random programs of size `n` until one leaks or `budget` programs
/// have been tried.
pub fn fuzz_trial(n: usize, trial: usize, seed: u64, env: &EnvConfig, inputs: &[Input], budget: u64) -> TrialRecord {
    let space = build_action_space(&env.action_space).expect("validated");
    let mut rng = chacha(derive_seed(seed, &[n as u64, trial as u64]));
    let mut wall_steps = 0;
    for k in 1..=budget {
        let p = random_program(n, &space, &mut rng);
        if leaks(&p, inputs, &env.contract, &env.spec, env.boosts_per_input, &mut wall_steps) {
            return TrialRecord { method: Method::Fuzz, n, trial, programs_tested: k, wall_steps, censored: false };
        }
    }
    TrialRecord { method: Method::Fuzz, n, trial, programs_tested: budget, wall_steps, censored: true }
}

fn leaks(p: &Program, inputs: &[Input], contract: &ContractSpec, spec: &SpecConfig, boosts: usize, steps: &mut u64) -> bool {
    match measure_counted(p, inputs, contract, spec) {
        Err(s) => {
            *steps += s;
            false
        }
        Ok(m) => {
            *steps += m.sim_steps;
            match detect_with(p, inputs, &m, contract, spec, boosts, false) {
                Ok(d) => {
                    *steps += d.sim_steps;
                    !d.reports.is_empty()
                }
                Err(_) => false,
            }
        }
    }
}

/// One agent trial: trains with maximum length `m` until the first leak.
pub fn rl_trial(m: usize, trial: usize, cfg: &ExperimentConfig, method: Method) -> Result<TrialRecord, AgentError> {
    let env_cfg = EnvConfig { max_len: m, ..cfg.env.clone() };
    let mut env = SpecEnv::new(env_cfg)?;
    let trainer = TrainerConfig {
        total_steps: cfg.rl_budget,
        seed: derive_seed(cfg.seed, &[m as u64, trial as u64, 1]),
        stop_at_first_leak: true,
        ..cfg.trainer.clone()
    };
    let log = match method {
        Method::Random => agent::random_search_with(&mut env, &trainer)?,
        _ => agent::train(&mut env, &trainer)?,
    };
    Ok(TrialRecord {
        method,
        n: m,
        trial,
        programs_tested: log.first_leak_step.unwrap_or(cfg.rl_budget),
        wall_steps: log.sim_steps,
        censored: log.first_leak_step.is_none(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub rows: Vec<TrialRecord>,
    pub stats: Vec<FuzzStats>,
}

impl CampaignResult {
    pub fn stats_for(&self, method: Method) -> impl Iterator<Item = &FuzzStats> {
        self.stats.iter().filter(move |s| s.method == method)
    }
}

/// Fuzzer trials over every size in `cfg.sizes`, in parallel; results in
/// `(n, trial)` order.
pub fn fuzz_campaign(cfg: &ExperimentConfig) -> CampaignResult {
    campaign(cfg, &[Method::Fuzz]).expect("fuzzing does not fault")
}

/// Runs each method over the size grid. Cells run concurrently; rows are
/// ordered by method, then `n`, then trial.
pub fn campaign(cfg: &ExperimentConfig, methods: &[Method]) -> Result<CampaignResult, AgentError> {
    let inputs = inputs_for(&cfg.env);
    let a = build_action_space(&cfg.env.action_space).map_err(EnvError::from)?.size();
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for &method in methods {
        let cells: Vec<(usize, usize)> =
            cfg.sizes.iter().flat_map(|&n| (0..cfg.trials).map(move |t| (n, t))).collect();
        let out: Result<Vec<TrialRecord>, AgentError> = cells
            .par_iter()
            .map(|&(n, t)| match method {
                Method::Fuzz => Ok(fuzz_trial(n, t, cfg.seed, &cfg.env, &inputs, cfg.fuzz_budget)),
                _ => rl_trial(n, t, cfg, method),
            })
            .collect();
        let out = out?;
        for &n in &cfg.sizes {
            let cell: Vec<TrialRecord> = out.iter().filter(|r| r.n == n).cloned().collect();
            stats.push(FuzzStats::from_trials(method, n, &cell, a, cfg.leak_len));
        }
        rows.extend(out);
    }
    Ok(CampaignResult { rows, stats })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
