//! Workbench for discovering speculative-execution leaks in a simulated
//! processor with a reinforcement-learning agent.
//!
//! * [`isa`]: toy instruction set, assembly format, action space
//! * [`arch`]: architectural simulator and contract traces
//! * [`uarch`]: speculative hardware model, Prime+Probe traces, counters
//! * [`detect`]: relational leak detection with input boosting
//! * [`env`]: the episodic environment the agent drives
//! * [`agent`]: PPO learner and the uniform random-search baseline
//! * [`harness`]: fuzzing baseline, scaling study, fixtures, CLI

pub mod agent;
pub mod arch;
pub mod detect;
pub mod env;
pub mod harness;
pub mod isa;
pub mod rng;
pub mod uarch;

pub use arch::{contract_trace, generate_inputs, ContractSpec, CTrace, Input};
pub use detect::{detect_violation, ViolationReport};
pub use isa::{build_action_space, parse_program, ActionSpace, ActionSpaceConfig, Instruction, Program};
pub use uarch::{hw_run, observe, HTrace, SpecConfig};
