//! Architectural (contract-level) simulator.
//!
//! Executes programs in order over a 4 KiB sandbox and records the contract
//! trace. `CT-SEQ` exposes memory addresses and branch outcomes along the
//! architectural path; `CT-COND` additionally exposes a bounded walk down the
//! not-taken direction of every conditional branch.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Instruction, Operand, Program, Register};
use crate::rng::{splitmix64, XorShift64Star};

pub const SANDBOX_SIZE: usize = 4096;
pub const DEFAULT_STEP_BUDGET: u64 = 10_000;
/// Size of a serialized [`Input`]: three little-endian registers then memory.
pub const INPUT_FILE_LEN: usize = 3 * 8 + SANDBOX_SIZE;

/// Effective sandbox address of an index value: reduced mod the sandbox size
/// and aligned down to 8 bytes.
#[inline]
pub fn sandbox_addr(index: u64) -> u16 {
    (index & (SANDBOX_SIZE as u64 - 1) & !7) as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Flags {
    pub sf: bool,
    pub cf: bool,
    pub zf: bool,
}

#[derive(Clone, PartialEq, Eq)]
pub struct ArchState {
    pub regs: [u64; 3],
    pub flags: Flags,
    pub pc: usize,
    pub mem: Box<[u8; SANDBOX_SIZE]>,
}

impl fmt::Debug for ArchState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArchState")
            .field("regs", &self.regs)
            .field("flags", &self.flags)
            .field("pc", &self.pc)
            .finish_non_exhaustive()
    }
}

/// A memory access performed by one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemAccess {
    pub addr: u16,
    /// `SBB [m], r` reads then writes its destination.
    pub store: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchOutcome {
    pub conditional: bool,
    pub taken: bool,
    /// Next pc after the branch.
    pub next: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEffect {
    pub access: Option<MemAccess>,
    pub branch: Option<BranchOutcome>,
}

impl StepEffect {
    /// Contract observations implied by this effect, in emission order.
    pub fn observations(&self) -> impl Iterator<Item = CtObs> + '_ {
        let mem = self.access.into_iter().flat_map(|a| {
            let load = Some(CtObs::LoadAddr(a.addr));
            let store = a.store.then_some(CtObs::StoreAddr(a.addr));
            load.into_iter().chain(store)
        });
        let br = self.branch.map(|b| CtObs::Pc { target: b.next as u32, taken: b.taken });
        mem.chain(br)
    }
}

fn clamp_target(pc: usize, disp: i32, len: usize) -> usize {
    (pc as i64 + disp as i64).clamp(0, len as i64) as usize
}

impl ArchState {
    pub fn from_input(input: &Input) -> Self {
        let mut mem = Box::new([0u8; SANDBOX_SIZE]);
        mem.copy_from_slice(&input.mem);
        ArchState { regs: input.regs, flags: Flags::default(), pc: 0, mem }
    }

    pub fn reg(&self, r: Register) -> u64 {
        r.gpr_index().map_or(0, |i| self.regs[i])
    }

    pub fn load(&self, addr: u16) -> u64 {
        let a = addr as usize;
        u64::from_le_bytes(self.mem[a..a + 8].try_into().unwrap())
    }

    pub fn store(&mut self, addr: u16, value: u64) {
        let a = addr as usize;
        self.mem[a..a + 8].copy_from_slice(&value.to_le_bytes());
    }

    /// Address written by `instr` from the current state, if it stores.
    pub fn store_addr(&self, instr: &Instruction) -> Option<u16> {
        match instr {
            Instruction::Sbb { dst: Operand::Mem(idx), .. } => Some(sandbox_addr(self.reg(*idx))),
            _ => None,
        }
    }

    fn read(&self, op: Operand) -> (u64, Option<u16>) {
        match op {
            Operand::Reg(r) => (self.reg(r), None),
            Operand::Mem(idx) => {
                let addr = sandbox_addr(self.reg(idx));
                (self.load(addr), Some(addr))
            }
        }
    }

    fn write_reg(&mut self, r: Register, value: u64) {
        if let Some(i) = r.gpr_index() {
            self.regs[i] = value;
        }
    }

    /// Executes the instruction at `self.pc` in a program of length
    /// `program_len`. `SBB`: `dst <- dst - src - CF` with borrow-out in CF.
    /// `IMUL`: low 64 bits of the signed product, CF set iff the product
    /// overflows 64 bits. Both set SF and ZF from the result.
    pub fn step(&mut self, instr: &Instruction, program_len: usize) -> StepEffect {
        let mut effect = StepEffect::default();
        match *instr {
            Instruction::Sbb { dst, src } => {
                let (b, src_addr) = self.read(src);
                let (a, dst_addr) = self.read(dst);
                let borrow_in = self.flags.cf as u64;
                let (t, o1) = a.overflowing_sub(b);
                let (r, o2) = t.overflowing_sub(borrow_in);
                self.flags = Flags { sf: (r as i64) < 0, cf: o1 || o2, zf: r == 0 };
                match dst {
                    Operand::Reg(reg) => self.write_reg(reg, r),
                    Operand::Mem(_) => self.store(dst_addr.unwrap(), r),
                }
                effect.access = match (src_addr, dst_addr) {
                    (Some(addr), _) => Some(MemAccess { addr, store: false }),
                    (None, Some(addr)) => Some(MemAccess { addr, store: true }),
                    (None, None) => None,
                };
                self.pc += 1;
            }
            Instruction::Imul { dst, src } => {
                let (b, src_addr) = self.read(src);
                let a = self.reg(dst);
                let wide = (a as i64 as i128) * (b as i64 as i128);
                let r = wide as u64;
                self.flags = Flags { sf: (r as i64) < 0, cf: wide != (r as i64 as i128), zf: r == 0 };
                self.write_reg(dst, r);
                effect.access = src_addr.map(|addr| MemAccess { addr, store: false });
                self.pc += 1;
            }
            Instruction::Jns(d) => {
                let taken = !self.flags.sf;
                let next = if taken { clamp_target(self.pc, d, program_len) } else { self.pc + 1 };
                effect.branch = Some(BranchOutcome { conditional: true, taken, next });
                self.pc = next;
            }
            Instruction::Jmp(d) => {
                let next = clamp_target(self.pc, d, program_len);
                effect.branch = Some(BranchOutcome { conditional: false, taken: true, next });
                self.pc = next;
            }
        }
        effect
    }

    /// Target of a conditional branch at `self.pc` if it were taken.
    pub fn taken_target(&self, disp: i32, program_len: usize) -> usize {
        clamp_target(self.pc, disp, program_len)
    }
}

/// Functional form of [`ArchState::step`].
pub fn arch_step(
    s: &ArchState,
    instr: &Instruction,
    program_len: usize,
) -> (ArchState, Vec<CtObs>, Option<BranchOutcome>) {
    let mut next = s.clone();
    let effect = next.step(instr, program_len);
    (next, effect.observations().collect(), effect.branch)
}

/// Register and flag snapshot plus a store undo log, for executing down a
/// path that is later discarded.
pub(crate) struct Checkpoint {
    regs: [u64; 3],
    flags: Flags,
    pc: usize,
    undo: Vec<(u16, u64)>,
}

impl Checkpoint {
    pub(crate) fn take(s: &ArchState) -> Self {
        Checkpoint { regs: s.regs, flags: s.flags, pc: s.pc, undo: Vec::new() }
    }

    /// Executes `instr` on `s`, logging any overwritten memory.
    pub(crate) fn step(&mut self, s: &mut ArchState, instr: &Instruction, len: usize) -> StepEffect {
        if let Some(addr) = s.store_addr(instr) {
            self.undo.push((addr, s.load(addr)));
        }
        s.step(instr, len)
    }

    pub(crate) fn restore(self, s: &mut ArchState) {
        for &(addr, old) in self.undo.iter().rev() {
            s.store(addr, old);
        }
        s.regs = self.regs;
        s.flags = self.flags;
        s.pc = self.pc;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContractMode {
    #[serde(rename = "CT-SEQ")]
    CtSeq,
    #[serde(rename = "CT-COND")]
    CtCond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ContractSpec {
    pub mode: ContractMode,
    /// Instructions exposed down each not-taken direction (CT-COND only).
    pub spec_depth: usize,
}

impl Default for ContractSpec {
    fn default() -> Self {
        ContractSpec { mode: ContractMode::CtSeq, spec_depth: 8 }
    }
}

impl ContractSpec {
    pub fn ct_seq() -> Self {
        ContractSpec::default()
    }

    pub fn ct_cond(spec_depth: usize) -> Self {
        ContractSpec { mode: ContractMode::CtCond, spec_depth }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mode == ContractMode::CtCond && self.spec_depth == 0 {
            return Err("CT-COND needs spec_depth >= 1".into());
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self.mode {
            ContractMode::CtSeq => "CT-SEQ".to_string(),
            ContractMode::CtCond => format!("CT-COND(depth={})", self.spec_depth),
        }
    }
}

/// One contract observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CtObs {
    LoadAddr(u16),
    StoreAddr(u16),
    /// Branch outcome: the pc control moved to, and whether it was taken.
    Pc { target: u32, taken: bool },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CTrace(pub Vec<CtObs>);

impl CTrace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn load_addrs(&self) -> impl Iterator<Item = u16> + '_ {
        self.0.iter().filter_map(|o| match o {
            CtObs::LoadAddr(a) => Some(*a),
            _ => None,
        })
    }
}

/// The step budget ran out before the program fell off its end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("program did not terminate within the step budget")]
pub struct NonTerminating;

/// Initial registers and sandbox memory for one run.
#[derive(Clone, PartialEq, Eq)]
pub struct Input {
    pub regs: [u64; 3],
    pub mem: Box<[u8]>,
    /// Seed this input was expanded from (0 for inputs loaded from files).
    pub seed: u64,
}

impl fmt::Debug for Input {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Input")
            .field("regs", &self.regs)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error)]
pub enum InputError {
    #[error("input file must be exactly {INPUT_FILE_LEN} bytes, got {0}")]
    Length(usize),
    #[error("need at least 2 inputs, got {0}")]
    TooFew(usize),
}

impl Input {
    /// Expands one input from `seed`: three registers, then memory, all drawn
    /// from a xorshift64* stream.
    pub fn from_seed(seed: u64) -> Input {
        let mut g = XorShift64Star::new(seed);
        let regs = [g.next_u64(), g.next_u64(), g.next_u64()];
        let mut mem = vec![0u8; SANDBOX_SIZE].into_boxed_slice();
        g.fill_bytes(&mut mem);
        Input { regs, mem, seed }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(INPUT_FILE_LEN);
        for r in self.regs {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.extend_from_slice(&self.mem);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Input, InputError> {
        if bytes.len() != INPUT_FILE_LEN {
            return Err(InputError::Length(bytes.len()));
        }
        let reg = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(Input {
            regs: [reg(0), reg(1), reg(2)],
            mem: bytes[24..].to_vec().into_boxed_slice(),
            seed: 0,
        })
    }
}

/// Expands `seed` into `count` inputs. Input `k` is expanded from the `k`-th
/// splitmix64 output of `seed`.
pub fn generate_inputs(seed: u64, count: usize) -> Result<Vec<Input>, InputError> {
    if count < 2 {
        return Err(InputError::TooFew(count));
    }
    let mut state = seed;
    Ok((0..count).map(|_| Input::from_seed(splitmix64(&mut state))).collect())
}

/// Result of an architectural run.
#[derive(Debug, Clone)]
pub struct ArchRun {
    pub trace: CTrace,
    pub final_state: ArchState,
    /// Architectural instructions executed.
    pub steps: u64,
    /// Instructions executed down not-taken directions (CT-COND).
    pub explored: u64,
}

/// Runs the architectural simulator. On budget exhaustion the partial run is
/// returned in `Err`.
pub(crate) fn run_contract(
    p: &Program,
    input: &Input,
    contract: &ContractSpec,
    budget: u64,
) -> Result<ArchRun, ArchRun> {
    let n = p.len();
    let mut s = ArchState::from_input(input);
    let mut trace = Vec::new();
    let mut steps = 0u64;
    let mut explored = 0u64;
    while s.pc < n {
        if steps >= budget {
            return Err(ArchRun { trace: CTrace(trace), final_state: s, steps, explored });
        }
        let pc = s.pc;
        let instr = p.instructions()[pc];
        let effect = s.step(&instr, n);
        steps += 1;
        trace.extend(effect.observations());
        if let (ContractMode::CtCond, Some(b)) = (contract.mode, effect.branch) {
            if b.conditional {
                let other = if b.taken {
                    pc + 1
                } else {
                    let Instruction::Jns(d) = instr else { unreachable!() };
                    (pc as i64 + d as i64).clamp(0, n as i64) as usize
                };
                explored += explore(p, &mut s, other, contract.spec_depth, &mut trace);
            }
        }
    }
    Ok(ArchRun { trace: CTrace(trace), final_state: s, steps, explored })
}

/// Walks `depth` instructions from `start` without nesting, appending their
/// observations, then restores `s`.
fn explore(p: &Program, s: &mut ArchState, start: usize, depth: usize, trace: &mut Vec<CtObs>) -> u64 {
    let n = p.len();
    let mut cp = Checkpoint::take(s);
    s.pc = start;
    let mut done = 0;
    while done < depth && s.pc < n {
        let instr = p.instructions()[s.pc];
        if instr.is_conditional_branch() {
            break;
        }
        let effect = cp.step(s, &instr, n);
        trace.extend(effect.observations());
        done += 1;
    }
    cp.restore(s);
    done as u64
}

/// Contract trace of `p` on `input`, or [`NonTerminating`] if more than
/// `step_budget` architectural steps are needed.
pub fn contract_trace(
    p: &Program,
    input: &Input,
    contract: &ContractSpec,
    step_budget: u64,
) -> Result<CTrace, NonTerminating> {
    run_contract(p, input, contract, step_budget)
        .map(|r| r.trace)
        .map_err(|_| NonTerminating)
}

/// Architectural run including the final state.
pub fn arch_run(p: &Program, input: &Input, contract: &ContractSpec, step_budget: u64) -> Result<ArchRun, NonTerminating> {
    run_contract(p, input, contract, step_budget).map_err(|_| NonTerminating)
}
