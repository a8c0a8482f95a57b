//! Relational leak detection.
//!
//! A leak is a pair of inputs whose contract traces are equal while their
//! hardware traces differ. Each base input is boosted into siblings that
//! provably share its contract trace; all inputs and siblings are then
//! partitioned by contract trace and hardware traces are compared inside each
//! class.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arch::{run_contract, CTrace, ContractSpec, Input, SANDBOX_SIZE};
use crate::isa::Program;
use crate::rng::{chacha, derive_seed};
use crate::uarch::{hw_run, measure, HTrace, InputObservation, Measurement, Rejected, SpecConfig};

/// Copy rounds allowed before boosting gives up.
pub const BOOST_ROUNDS: usize = 10;
pub const DEFAULT_BOOSTS_PER_INPUT: usize = 2;

/// Inputs sharing one contract trace.
#[derive(Debug, Clone)]
pub struct InputClass {
    pub ctrace: CTrace,
    pub members: Vec<MemberId>,
}

/// Which input a class member is: base input index and sibling number
/// (0 for the base itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberId {
    pub input: usize,
    pub sibling: usize,
}

#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub program: Program,
    pub contract: ContractSpec,
    pub spec: SpecConfig,
    pub witness: (Input, Input),
    pub witness_ids: (MemberId, MemberId),
    pub htraces: (HTrace, HTrace),
    pub diverging_sets: Vec<usize>,
}

/// Serialized form of a [`ViolationReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub program: String,
    pub contract: String,
    pub window: usize,
    pub alpha: WitnessRecord,
    pub beta: WitnessRecord,
    pub diverging_sets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessRecord {
    pub input: usize,
    pub sibling: usize,
    pub seed: u64,
    pub htrace: String,
}

impl ViolationReport {
    pub fn to_record(&self) -> ReportRecord {
        let w = |id: MemberId, input: &Input, h: HTrace| WitnessRecord {
            input: id.input,
            sibling: id.sibling,
            seed: input.seed,
            htrace: h.to_hex(),
        };
        ReportRecord {
            program: self.program.render(),
            contract: self.contract.name(),
            window: self.spec.window,
            alpha: w(self.witness_ids.0, &self.witness.0, self.htraces.0),
            beta: w(self.witness_ids.1, &self.witness.1, self.htraces.1),
            diverging_sets: self.diverging_sets.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("report serializes")
    }

    /// Re-simulates both witnesses: contract traces must match and hardware
    /// traces must differ.
    pub fn revalidate(&self) -> bool {
        let budget = self.spec.step_budget;
        let (a, b) = (&self.witness.0, &self.witness.1);
        let ca = run_contract(&self.program, a, &self.contract, budget);
        let cb = run_contract(&self.program, b, &self.contract, budget);
        let (Ok(ca), Ok(cb)) = (ca, cb) else { return false };
        let ha = hw_run(&self.program, a, &self.spec, budget);
        let hb = hw_run(&self.program, b, &self.spec, budget);
        let (Ok(ha), Ok(hb)) = (ha, hb) else { return false };
        ca.trace == cb.trace && ha.htrace != hb.htrace && (ha.htrace, hb.htrace) == self.htraces
    }
}

/// Derives a sibling of `base` with the same registers and fresh memory,
/// copying `base` bytes at every loaded address until its contract trace
/// matches `base`'s. `None` if that fails within [`BOOST_ROUNDS`].
pub fn boost_input<R: RngCore>(
    p: &Program,
    base: &Input,
    contract: &ContractSpec,
    budget: u64,
    rng: &mut R,
) -> Option<Input> {
    let target = run_contract(p, base, contract, budget).ok()?.trace;
    boost_against(p, base, &target, contract, budget, rng).map(|(sib, _)| sib)
}

/// Boosting against a known base trace. Also returns simulator steps spent.
fn boost_against<R: RngCore>(
    p: &Program,
    base: &Input,
    target: &CTrace,
    contract: &ContractSpec,
    budget: u64,
    rng: &mut R,
) -> Option<(Input, u64)> {
    let mut mem = vec![0u8; SANDBOX_SIZE].into_boxed_slice();
    rng.fill_bytes(&mut mem);
    let mut sib = Input { regs: base.regs, mem, seed: rng.random() };
    let mut steps = 0;
    for _ in 0..BOOST_ROUNDS {
        let run = run_contract(p, &sib, contract, budget);
        let terminated = run.is_ok();
        let run = run.unwrap_or_else(|partial| partial);
        steps += run.steps + run.explored;
        let mut changed = false;
        for addr in run.trace.load_addrs() {
            let a = addr as usize;
            if sib.mem[a..a + 8] != base.mem[a..a + 8] {
                sib.mem[a..a + 8].copy_from_slice(&base.mem[a..a + 8]);
                changed = true;
            }
        }
        if !changed {
            return (terminated && run.trace == *target).then_some((sib, steps));
        }
    }
    None
}

/// Seed of the boosting stream for sibling `k` of base input `index`.
pub fn sibling_stream_seed(base: &Input, index: usize, k: usize) -> u64 {
    derive_seed(base.seed, &[index as u64, k as u64, 0xB005])
}

struct Member {
    id: MemberId,
    input: Input,
    ctrace: CTrace,
    htrace: HTrace,
}

/// Detection outcome plus simulator effort.
#[derive(Debug, Clone)]
pub struct Detection {
    pub reports: Vec<ViolationReport>,
    pub classes: Vec<InputClass>,
    pub sim_steps: u64,
}

/// Runs detection given the base measurement. With `exhaustive` every
/// diverging pair is reported, otherwise only the first.
pub(crate) fn detect_with(
    p: &Program,
    inputs: &[Input],
    base: &Measurement,
    contract: &ContractSpec,
    cfg: &SpecConfig,
    boosts_per_input: usize,
    exhaustive: bool,
) -> Result<Detection, Rejected> {
    let budget = cfg.step_budget;
    let mut sim_steps = 0;
    let mut members: Vec<Member> = Vec::with_capacity(inputs.len() * (boosts_per_input + 1));
    for (i, (input, rec)) in inputs.iter().zip(&base.records).enumerate() {
        members.push(Member {
            id: MemberId { input: i, sibling: 0 },
            input: input.clone(),
            ctrace: rec.ctrace.clone(),
            htrace: rec.htrace,
        });
        for k in 1..=boosts_per_input {
            let stream = sibling_stream_seed(input, i, k);
            let Some((mut sib, steps)) = boost_against(p, input, &rec.ctrace, contract, budget, &mut chacha(stream))
            else {
                continue;
            };
            sib.seed = stream;
            sim_steps += steps;
            let hw = hw_run(p, &sib, cfg, budget).map_err(|_| Rejected)?;
            sim_steps += hw.counters.uops_issued;
            members.push(Member {
                id: MemberId { input: i, sibling: k },
                input: sib,
                ctrace: rec.ctrace.clone(),
                htrace: hw.htrace,
            });
        }
    }

    let mut class_of: HashMap<&CTrace, usize> = HashMap::new();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (m, member) in members.iter().enumerate() {
        let next = classes.len();
        let c = *class_of.entry(&member.ctrace).or_insert(next);
        if c == next {
            classes.push(Vec::new());
        }
        classes[c].push(m);
    }

    let mut reports = Vec::new();
    'classes: for class in &classes {
        for (x, &a) in class.iter().enumerate() {
            for &b in &class[x + 1..] {
                let (ma, mb) = (&members[a], &members[b]);
                if ma.htrace != mb.htrace {
                    reports.push(ViolationReport {
                        program: p.clone(),
                        contract: *contract,
                        spec: *cfg,
                        witness: (ma.input.clone(), mb.input.clone()),
                        witness_ids: (ma.id, mb.id),
                        htraces: (ma.htrace, mb.htrace),
                        diverging_sets: HTrace(ma.htrace.0 ^ mb.htrace.0).sets().collect(),
                    });
                    if !exhaustive {
                        break 'classes;
                    }
                }
            }
            if !exhaustive {
                // The first diverging pair involves the class head if any does.
                break;
            }
        }
    }

    let classes = classes
        .into_iter()
        .map(|idx| InputClass {
            ctrace: members[idx[0]].ctrace.clone(),
            members: idx.iter().map(|&m| members[m].id).collect(),
        })
        .collect();
    Ok(Detection { reports, classes, sim_steps })
}

/// First contract violation of `p` over `inputs` and their boosted siblings.
pub fn detect_violation(
    p: &Program,
    inputs: &[Input],
    contract: &ContractSpec,
    cfg: &SpecConfig,
    boosts_per_input: usize,
) -> Result<Option<ViolationReport>, Rejected> {
    let base = measure(p, inputs, contract, cfg)?;
    let det = detect_with(p, inputs, &base, contract, cfg, boosts_per_input, false)?;
    Ok(det.reports.into_iter().next())
}

/// Every diverging pair, for use as a test oracle.
pub fn detect_all(
    p: &Program,
    inputs: &[Input],
    contract: &ContractSpec,
    cfg: &SpecConfig,
    boosts_per_input: usize,
) -> Result<Detection, Rejected> {
    let base = measure(p, inputs, contract, cfg)?;
    detect_with(p, inputs, &base, contract, cfg, boosts_per_input, true)
}

/// Coarse speculation classification of a program over a set of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecFilter {
    None,
    Misspec,
    Observable,
}

pub(crate) fn filter_with(
    p: &Program,
    inputs: &[Input],
    records: &[InputObservation],
    cfg: &SpecConfig,
) -> Result<(SpecFilter, u64), Rejected> {
    let misspec = records.iter().any(|r| r.br_misses > 0 || r.tran_uops > 0);
    if !misspec {
        return Ok((SpecFilter::None, 0));
    }
    let off = cfg.with_window(0);
    let mut steps = 0;
    for (input, rec) in inputs.iter().zip(records) {
        if rec.tran_uops == 0 {
            // No transient issue: the run is identical with speculation off.
            continue;
        }
        let hw = hw_run(p, input, &off, cfg.step_budget).map_err(|_| Rejected)?;
        steps += hw.counters.uops_issued;
        if hw.htrace != rec.htrace {
            return Ok((SpecFilter::Observable, steps));
        }
    }
    Ok((SpecFilter::Misspec, steps))
}

/// `none` when nothing was mispredicted, `observable` when some input's cache
/// footprint differs from its speculation-off footprint, else `misspec`.
pub fn speculation_filter(p: &Program, inputs: &[Input], cfg: &SpecConfig) -> Result<SpecFilter, Rejected> {
    let records = measure(p, inputs, &ContractSpec::ct_seq(), cfg)?.records;
    filter_with(p, inputs, &records, cfg).map(|(f, _)| f)
}
