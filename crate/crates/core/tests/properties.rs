use proptest::prelude::*;

use specgym::arch::{arch_run, CtObs, SANDBOX_SIZE};
use specgym::env::{EnvConfig, SpecEnv};
use specgym::isa::{render_program, ActionSpaceConfig};
use specgym::uarch::observe;
use specgym::{build_action_space, contract_trace, hw_run, parse_program, ContractSpec, Input, Program, SpecConfig};

fn default_space() -> specgym::ActionSpace {
    build_action_space(&ActionSpaceConfig::default()).unwrap()
}

fn program(ids: &[usize]) -> Program {
    let space = default_space();
    ids.iter().map(|&i| space.actions()[i]).collect()
}

fn ids(max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..40, 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn render_parse_round_trip(a in ids(30)) {
        let p = program(&a);
        let text = render_program(&p);
        prop_assert_eq!(parse_program(&text).unwrap(), p.clone());
        prop_assert_eq!(parse_program(&text.to_lowercase()).unwrap(), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, ..ProptestConfig::default() })]

    #[test]
    fn speculation_is_architecturally_invisible(a in ids(16), seed in any::<u64>(), window in 0usize..12) {
        let p = program(&a);
        let input = Input::from_seed(seed);
        let budget = 2_000;
        let arch = arch_run(&p, &input, &ContractSpec::ct_seq(), budget);
        let hw = hw_run(&p, &input, &SpecConfig { window, ..SpecConfig::default() }, budget);
        prop_assert_eq!(arch.is_ok(), hw.is_ok());
        if let (Ok(arch), Ok(hw)) = (arch, hw) {
            prop_assert!(arch.final_state == hw.final_state);
            prop_assert_eq!(hw.counters.uops_retired, arch.steps);
            prop_assert!(hw.counters.uops_issued >= hw.counters.uops_retired);
            if window == 0 {
                prop_assert_eq!(hw.counters.tran_uops(), 0);
            }
        }
    }

    #[test]
    fn ct_seq_ignores_hardware_config(a in ids(16), seed in any::<u64>(), window in 0usize..12) {
        let p = program(&a);
        let inputs = vec![Input::from_seed(seed), Input::from_seed(seed ^ 1)];
        let seq = ContractSpec::ct_seq();
        let base = observe(&p, &inputs, &seq, &SpecConfig::default());
        let other = observe(&p, &inputs, &seq, &SpecConfig { window, ..SpecConfig::default() });
        if let (Ok(x), Ok(y)) = (base, other) {
            for (r, s) in x.iter().zip(&y) {
                prop_assert_eq!(&r.ctrace, &s.ctrace);
            }
        }
    }

    #[test]
    fn budget_is_exact(a in ids(12), seed in any::<u64>()) {
        let p = program(&a);
        let input = Input::from_seed(seed);
        if let Ok(run) = arch_run(&p, &input, &ContractSpec::ct_seq(), 500) {
            prop_assert!(arch_run(&p, &input, &ContractSpec::ct_seq(), run.steps).is_ok());
            if run.steps > 0 {
                prop_assert!(arch_run(&p, &input, &ContractSpec::ct_seq(), run.steps - 1).is_err());
            }
        }
    }

    #[test]
    fn accesses_stay_in_sandbox(a in ids(16), seed in any::<u64>(), depth in 0usize..10) {
        let p = program(&a);
        let input = Input::from_seed(seed);
        for c in [ContractSpec::ct_seq(), ContractSpec::ct_cond(depth)] {
            if let Ok(t) = contract_trace(&p, &input, &c, 1_000) {
                for o in &t.0 {
                    match *o {
                        CtObs::LoadAddr(x) | CtObs::StoreAddr(x) => {
                            prop_assert!((x as usize) + 8 <= SANDBOX_SIZE && x % 8 == 0)
                        }
                        CtObs::Pc { target, .. } => prop_assert!(target as usize <= p.len()),
                    }
                }
            }
        }
    }
}

fn small_env() -> EnvConfig {
    EnvConfig { inputs: 4, max_len: 10, ..EnvConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 60, ..ProptestConfig::default() })]

    #[test]
    fn history_matches_fresh_prefix_runs(a in prop::collection::vec(0usize..40, 1..10)) {
        let cfg = small_env();
        let mut env = SpecEnv::new(cfg.clone()).unwrap();
        env.reset(0);
        for &id in &a {
            if env.step(id).unwrap().terminated {
                break;
            }
        }
        let p = env.program().clone();
        prop_assert_eq!(env.history().len(), p.len());
        for (k, obs) in env.history().iter().enumerate() {
            let fresh = observe(&p.prefix(k + 1), env.inputs(), &cfg.contract, &cfg.spec).unwrap();
            prop_assert_eq!(&obs.records, &fresh);
        }
    }

    #[test]
    fn episodes_are_deterministic(a in prop::collection::vec(0usize..40, 1..10)) {
        let run = || {
            let mut env = SpecEnv::new(small_env()).unwrap();
            env.reset(3);
            let mut out = Vec::new();
            for &id in &a {
                let r = env.step(id).unwrap();
                out.push((env.encode(&r.obs), r.reward.to_bits(), r.terminated, r.truncated, r.info.sim_steps));
                if r.terminated || r.truncated {
                    break;
                }
            }
            out
        };
        prop_assert_eq!(run(), run());
    }
}
