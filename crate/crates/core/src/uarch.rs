//! Speculative hardware model.
//!
//! In-order issue with a 64-entry two-bit PHT, a direct-mapped 64-set cache
//! that is primed with attacker lines and probed after the run, and
//! branch-resolution delay folded into a speculation window: a mispredicted
//! conditional branch lets up to `window` instructions issue down the
//! predicted path before they are squashed. Squashed instructions keep their
//! cache footprint.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{
    run_contract, ArchState, CTrace, Checkpoint, ContractSpec, Input, NonTerminating, DEFAULT_STEP_BUDGET,
    SANDBOX_SIZE,
};
use crate::isa::{Instruction, Program};

pub const CACHE_SETS: usize = 64;
pub const LINE_SIZE: usize = 64;
pub const PHT_ENTRIES: usize = 64;
pub const PHT_RESET: u8 = 1;

const _: () = assert!(CACHE_SETS * LINE_SIZE == SANDBOX_SIZE);

pub fn cache_set(addr: u16) -> usize {
    addr as usize / LINE_SIZE
}

/// Direct-mapped cache over the sandbox. Bit `s` of `victim` is set when
/// set `s` holds a victim line, i.e. the attacker's primed line was evicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CacheModel {
    victim: u64,
}

impl CacheModel {
    /// Prime phase: every set holds an attacker line.
    pub fn primed() -> Self {
        CacheModel { victim: 0 }
    }

    pub fn touch(&mut self, addr: u16) {
        self.victim |= 1 << cache_set(addr);
    }

    /// Probe phase.
    pub fn probe(&self) -> HTrace {
        HTrace(self.victim)
    }
}

/// Two-bit saturating counters indexed by branch pc mod 64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pht {
    counters: [u8; PHT_ENTRIES],
}

impl Pht {
    pub fn reset() -> Self {
        Pht { counters: [PHT_RESET; PHT_ENTRIES] }
    }

    pub fn counter(&self, pc: usize) -> u8 {
        self.counters[pc % PHT_ENTRIES]
    }

    pub fn counters(&self) -> &[u8; PHT_ENTRIES] {
        &self.counters
    }

    pub fn predict(&self, pc: usize) -> bool {
        self.counter(pc) >= 2
    }

    pub fn update(&mut self, pc: usize, taken: bool) {
        let c = &mut self.counters[pc % PHT_ENTRIES];
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MicroArchState {
    pub cache: CacheModel,
    pub pht: Pht,
}

/// Canonical state: cache fully primed, every PHT counter weakly not-taken.
pub fn reset_state() -> MicroArchState {
    MicroArchState { cache: CacheModel::primed(), pht: Pht::reset() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecConfig {
    /// Instructions issued past an unresolved branch. 0 disables speculation.
    pub window: usize,
    /// Conditional branches that may be in flight at once.
    pub nesting: usize,
    /// Committed-instruction budget, shared with the contract simulator.
    pub step_budget: u64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig { window: 8, nesting: 1, step_budget: DEFAULT_STEP_BUDGET }
    }
}

impl SpecConfig {
    pub fn with_window(self, window: usize) -> Self {
        SpecConfig { window, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PerfCounters {
    pub br_misses: u64,
    pub uops_issued: u64,
    pub uops_retired: u64,
}

impl PerfCounters {
    pub fn tran_uops(&self) -> u64 {
        self.uops_issued - self.uops_retired
    }
}

/// Prime+Probe result: bit `s` set iff cache set `s` was evicted.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct HTrace(pub u64);

impl HTrace {
    pub fn sets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..CACHE_SETS).filter(|s| self.0 >> s & 1 == 1)
    }

    pub fn to_hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

impl fmt::Debug for HTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HTrace({:016x})", self.0)
    }
}

impl fmt::Display for HTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for HTrace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

#[derive(Debug, Clone)]
pub struct HwRun {
    pub htrace: HTrace,
    pub counters: PerfCounters,
    pub final_state: ArchState,
    pub uarch: MicroArchState,
}

/// Runs `p` on `input` from the canonical reset state.
pub fn hw_run(p: &Program, input: &Input, cfg: &SpecConfig, budget: u64) -> Result<HwRun, NonTerminating> {
    hw_run_from(reset_state(), p, input, cfg, budget)
}

/// Runs `p` from an explicit microarchitectural state.
pub fn hw_run_from(
    mut uarch: MicroArchState,
    p: &Program,
    input: &Input,
    cfg: &SpecConfig,
    budget: u64,
) -> Result<HwRun, NonTerminating> {
    let n = p.len();
    let mut s = ArchState::from_input(input);
    let mut ctr = PerfCounters::default();
    let mut committed = 0u64;
    while s.pc < n {
        if committed >= budget {
            return Err(NonTerminating);
        }
        let pc = s.pc;
        let instr = p.instructions()[pc];
        if let Instruction::Jns(d) = instr {
            let predicted = uarch.pht.predict(pc);
            let effect = s.step(&instr, n);
            let actual = effect.branch.expect("JNS always branches").taken;
            if predicted != actual {
                let wrong_path = if predicted { s.taken_target_from(pc, d, n) } else { pc + 1 };
                ctr.uops_issued += transient(p, &mut s, &mut uarch, wrong_path, cfg);
                ctr.br_misses += 1;
            }
            uarch.pht.update(pc, actual);
        } else {
            let effect = s.step(&instr, n);
            if let Some(a) = effect.access {
                uarch.cache.touch(a.addr);
            }
        }
        ctr.uops_issued += 1;
        ctr.uops_retired += 1;
        committed += 1;
    }
    Ok(HwRun { htrace: uarch.cache.probe(), counters: ctr, final_state: s, uarch })
}

/// Issues up to `cfg.window` instructions from `start` on a checkpoint of
/// `s`, then squashes them. Returns the number issued. A conditional branch
/// beyond the nesting limit resolves the outer branch first, which ends the
/// window.
fn transient(p: &Program, s: &mut ArchState, uarch: &mut MicroArchState, start: usize, cfg: &SpecConfig) -> u64 {
    let n = p.len();
    let mut cp = Checkpoint::take(s);
    s.pc = start;
    let mut issued = 0usize;
    let mut in_flight = 1usize;
    while issued < cfg.window && s.pc < n {
        let pc = s.pc;
        let instr = p.instructions()[pc];
        if let Instruction::Jns(d) = instr {
            if in_flight >= cfg.nesting {
                break;
            }
            in_flight += 1;
            s.pc = if uarch.pht.predict(pc) { s.taken_target_from(pc, d, n) } else { pc + 1 };
        } else {
            let effect = cp.step(s, &instr, n);
            if let Some(a) = effect.access {
                uarch.cache.touch(a.addr);
            }
        }
        issued += 1;
    }
    cp.restore(s);
    issued as u64
}

impl ArchState {
    fn taken_target_from(&self, pc: usize, disp: i32, len: usize) -> usize {
        (pc as i64 + disp as i64).clamp(0, len as i64) as usize
    }
}

/// Per-input measurement: the observation tuple `(h, c, b, t)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InputObservation {
    pub htrace: HTrace,
    pub ctrace: CTrace,
    pub br_misses: u64,
    pub tran_uops: u64,
}

/// Some input made one of the simulators exceed its step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("program rejected: non-terminating on at least one input")]
pub struct Rejected;

/// Measurement of one program plus the simulator effort it took.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub records: Vec<InputObservation>,
    /// Final architectural state per input (from the contract simulator).
    pub final_states: Vec<ArchState>,
    pub sim_steps: u64,
}

pub(crate) fn measure(
    p: &Program,
    inputs: &[Input],
    contract: &ContractSpec,
    cfg: &SpecConfig,
) -> Result<Measurement, Rejected> {
    measure_counted(p, inputs, contract, cfg).map_err(|_| Rejected)
}

/// [`measure`], reporting the simulator steps spent before a rejection.
pub(crate) fn measure_counted(
    p: &Program,
    inputs: &[Input],
    contract: &ContractSpec,
    cfg: &SpecConfig,
) -> Result<Measurement, u64> {
    let mut records = Vec::with_capacity(inputs.len());
    let mut final_states = Vec::with_capacity(inputs.len());
    let mut sim_steps = 0;
    for input in inputs {
        let arch = match run_contract(p, input, contract, cfg.step_budget) {
            Ok(a) => a,
            Err(partial) => return Err(sim_steps + partial.steps + partial.explored),
        };
        sim_steps += arch.steps + arch.explored;
        let hw = hw_run(p, input, cfg, cfg.step_budget).map_err(|_| sim_steps + cfg.step_budget)?;
        sim_steps += hw.counters.uops_issued;
        records.push(InputObservation {
            htrace: hw.htrace,
            ctrace: arch.trace,
            br_misses: hw.counters.br_misses,
            tran_uops: hw.counters.tran_uops(),
        });
        final_states.push(arch.final_state);
    }
    Ok(Measurement { records, final_states, sim_steps })
}

/// Measures `p` on every input from a fresh reset state.
pub fn observe(
    p: &Program,
    inputs: &[Input],
    contract: &ContractSpec,
    cfg: &SpecConfig,
) -> Result<Vec<InputObservation>, Rejected> {
    measure(p, inputs, contract, cfg).map(|m| m.records)
}
