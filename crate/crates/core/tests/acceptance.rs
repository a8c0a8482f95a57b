//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every threshold is a constant below.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use specgym::agent::{loss_and_grad, random_search_with, train, LossCoefs, PolicyParams, Sample, TrainerConfig};
use specgym::arch::arch_run;
use specgym::detect::{boost_input, detect_all};
use specgym::env::{EnvConfig, SpecEnv};
use specgym::harness::{
    campaign, fixture_action_space, log_log_slope, median, planted_fixture, random_program, run_cli, ExperimentConfig,
    Method,
};
use specgym::rng::{chacha, derive_seed};
use specgym::{
    build_action_space, contract_trace, detect_violation, generate_inputs, hw_run, ActionSpace, ActionSpaceConfig,
    ContractSpec, Input, Program, SpecConfig, ViolationReport,
};

const SEED: u64 = 2024;

const C1_TIME: Duration = Duration::from_secs(5);
const C2_PAIRS: usize = 10_000;
const C2_TIME: Duration = Duration::from_secs(120);
const C2_MAX_LEN: usize = 24;
const C2_BUDGET: u64 = 2_000;
const C4_PROGRAMS: usize = 10_000;
const C4_MAX_LEN: usize = 16;
const C5_PROGRAMS: usize = 1_000;
const C5_ATTEMPTS_PER_PROGRAM: usize = 2;
const C5_MIN_RATE: f64 = 0.95;
const C5_TIME: Duration = Duration::from_secs(120);
const C6_POINTS: usize = 100;
const C6_H: f64 = 1e-5;
const C6_MAX_REL: f64 = 1e-4;
const C6_SIZES: [usize; 3] = [4, 8, 8];
const C6_ACTIONS: usize = 3;
const C7_SEEDS: u64 = 5;
const C7_MIN_FOUND: usize = 4;
const C7_MAX_LEN: usize = 12;
const C7_BUDGET: u64 = 200_000;
const C7_TIME: Duration = Duration::from_secs(30 * 60);
const C8_SIZES: [usize; 4] = [4, 8, 16, 32];
const C8_FUZZ_TRIALS: usize = 25;
const C8_FUZZ_BUDGET: u64 = 20_000;
const C8_RL_TRIALS: usize = 5;
const C8_MIN_GROWTH: f64 = 4.0;
const C8_MAX_SLOPE: f64 = 1.0;
const C8_TIME: Duration = Duration::from_secs(60 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn default_space() -> ActionSpace {
    build_action_space(&ActionSpaceConfig::default()).unwrap()
}

/// Random program of length 1..=max over the default space.
fn random_default_program(rng: &mut ChaCha8Rng, space: &ActionSpace, max: usize) -> Program {
    let n = rng.random_range(1..=max);
    random_program(n, space, rng)
}

fn c1_fixture(reports: &mut Vec<ViolationReport>) -> Outcome {
    let t = Instant::now();
    let (p, cfg) = planted_fixture();
    let inputs = generate_inputs(cfg.input_seed, cfg.inputs).unwrap();
    let seq = detect_violation(&p, &inputs, &cfg.contract, &cfg.spec, cfg.boosts_per_input).unwrap();
    let off = SpecConfig { window: 0, ..cfg.spec };
    let w0 = detect_violation(&p, &inputs, &cfg.contract, &off, cfg.boosts_per_input).unwrap();
    let cond = ContractSpec::ct_cond(cfg.spec.window);
    let ct_cond = detect_violation(&p, &inputs, &cond, &cfg.spec, cfg.boosts_per_input).unwrap();
    let elapsed = t.elapsed();
    let pass = seq.is_some() && w0.is_none() && ct_cond.is_none() && elapsed < C1_TIME;
    let detail = format!(
        "CT-SEQ violation={} W=0 violation={} CT-COND(depth {}) violation={} in {:.2?}",
        seq.is_some(),
        w0.is_some(),
        cond.spec_depth,
        ct_cond.is_some(),
        elapsed
    );
    reports.extend(seq);
    if let Ok(all) = detect_all(&p, &inputs, &cfg.contract, &cfg.spec, cfg.boosts_per_input) {
        reports.extend(all.reports);
    }
    outcome(pass, detail)
}

fn c2_c3_invisibility() -> (Outcome, Outcome) {
    let t = Instant::now();
    let space = default_space();
    let mut rng = chacha(derive_seed(SEED, &[2]));
    let spec = SpecConfig::default();
    let off = SpecConfig { window: 0, ..spec };
    let (mut pairs, mut tried, mut state_mismatch) = (0usize, 0usize, 0usize);
    let (mut counter_mismatch, mut w0_transient, mut transient_total) = (0usize, 0usize, 0u64);
    while pairs < C2_PAIRS {
        tried += 1;
        let p = random_default_program(&mut rng, &space, C2_MAX_LEN);
        let input = Input::from_seed(rng.random());
        let Ok(arch) = arch_run(&p, &input, &ContractSpec::ct_seq(), C2_BUDGET) else { continue };
        let (Ok(hw), Ok(hw0)) = (hw_run(&p, &input, &spec, C2_BUDGET), hw_run(&p, &input, &off, C2_BUDGET)) else {
            state_mismatch += 1;
            continue;
        };
        pairs += 1;
        if hw.final_state != arch.final_state || hw0.final_state != arch.final_state {
            state_mismatch += 1;
        }
        for h in [&hw, &hw0] {
            let c = h.counters;
            if c.tran_uops() != c.uops_issued - c.uops_retired || c.uops_retired != arch.steps {
                counter_mismatch += 1;
            }
        }
        transient_total += hw.counters.tran_uops();
        if hw0.counters.tran_uops() != 0 {
            w0_transient += 1;
        }
    }
    let elapsed = t.elapsed();
    (
        outcome(
            state_mismatch == 0 && elapsed < C2_TIME,
            format!(
                "{pairs} terminating pairs ({tried} drawn), {state_mismatch} final-state mismatches, \
                 {transient_total} transient uops exercised, {elapsed:.2?}"
            ),
        ),
        outcome(
            counter_mismatch == 0 && w0_transient == 0,
            format!(
                "{} runs: {counter_mismatch} violate tran = issued - retired (retired = committed), \
                 {w0_transient} W=0 runs with transient uops",
                2 * pairs
            ),
        ),
    )
}

fn c4_soundness(reports: &[ViolationReport]) -> Outcome {
    let invalid = reports.iter().filter(|r| !r.revalidate()).count();
    let space = default_space();
    let mut rng = chacha(derive_seed(SEED, &[4]));
    let inputs = generate_inputs(derive_seed(SEED, &[4, 1]), 20).unwrap();
    let off = SpecConfig { window: 0, ..SpecConfig::default() };
    let mut w0_reports = 0;
    let mut rejected = 0;
    for _ in 0..C4_PROGRAMS {
        let p = random_default_program(&mut rng, &space, C4_MAX_LEN);
        match detect_violation(&p, &inputs, &ContractSpec::ct_seq(), &off, 2) {
            Ok(Some(_)) => w0_reports += 1,
            Ok(None) => {}
            Err(_) => rejected += 1,
        }
    }
    outcome(
        !reports.is_empty() && invalid == 0 && w0_reports == 0,
        format!(
            "{} reports re-simulated, {invalid} failed; W=0: {w0_reports} reports over {C4_PROGRAMS} programs \
             ({rejected} non-terminating)",
            reports.len()
        ),
    )
}

fn c5_boost() -> Outcome {
    let t = Instant::now();
    let space = default_space();
    let mut rng = chacha(derive_seed(SEED, &[5]));
    let contract = ContractSpec::ct_seq();
    let budget = SpecConfig::default().step_budget;
    let (mut programs, mut attempts, mut found, mut bad) = (0usize, 0usize, 0usize, 0usize);
    while programs < C5_PROGRAMS {
        let p = random_default_program(&mut rng, &space, C2_MAX_LEN);
        let bases: Vec<Input> = (0..C5_ATTEMPTS_PER_PROGRAM).map(|_| Input::from_seed(rng.random())).collect();
        let traces: Vec<_> = bases.iter().map(|b| contract_trace(&p, b, &contract, budget)).collect();
        if traces.iter().any(|t| t.is_err()) {
            continue;
        }
        programs += 1;
        for (base, trace) in bases.iter().zip(traces) {
            attempts += 1;
            let mut brng = chacha(rng.random());
            if let Some(sib) = boost_input(&p, base, &contract, budget, &mut brng) {
                found += 1;
                let ok = sib.regs == base.regs && contract_trace(&p, &sib, &contract, budget).ok() == trace.ok();
                if !ok {
                    bad += 1;
                }
            }
        }
    }
    let rate = found as f64 / attempts as f64;
    let elapsed = t.elapsed();
    outcome(
        rate >= C5_MIN_RATE && bad == 0 && elapsed < C5_TIME,
        format!(
            "{found}/{attempts} attempts returned a sibling ({:.2}% >= {:.0}%), {bad} with unequal CTrace, {elapsed:.2?}",
            100.0 * rate,
            100.0 * C5_MIN_RATE
        ),
    )
}

/// Straightforward re-implementation of the documented network layout: per
/// layer, an `out x in` row-major weight matrix then `out` biases.
fn naive_forward(flat: &[f64], sizes: &[usize], x: &[f64]) -> Vec<f64> {
    let mut off = 0;
    let mut a = x.to_vec();
    for l in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w: Vec<Vec<f64>> = (0..n_out).map(|o| flat[off + o * n_in..off + (o + 1) * n_in].to_vec()).collect();
        let b = &flat[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let z: Vec<f64> = (0..n_out).map(|o| b[o] + (0..n_in).map(|i| w[o][i] * a[i]).sum::<f64>()).collect();
        a = if l + 2 < sizes.len() { z.iter().map(|v| v.tanh()).collect() } else { z };
    }
    a
}

fn naive_loss(flat: &[f64], n_policy: usize, batch: &[Sample], c: LossCoefs) -> f64 {
    let p_sizes = [C6_SIZES[0], C6_SIZES[1], C6_SIZES[2], C6_ACTIONS];
    let v_sizes = [C6_SIZES[0], C6_SIZES[1], C6_SIZES[2], 1];
    let mut total = 0.0;
    for s in batch {
        let logits = naive_forward(&flat[..n_policy], &p_sizes, s.obs);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let ratio = (probs[s.action].ln() - s.old_log_prob).exp();
        let surr = (ratio * s.advantage).min(ratio.clamp(1.0 - c.clip, 1.0 + c.clip) * s.advantage);
        let h: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
        let v = naive_forward(&flat[n_policy..], &v_sizes, s.obs)[0];
        total += -surr + c.value_coef * (v - s.ret).powi(2) - c.entropy_coef * h;
    }
    total / batch.len() as f64
}

fn c6_gradients() -> Outcome {
    let mut rng = chacha(derive_seed(SEED, &[6]));
    let coefs = LossCoefs { clip: 0.2, value_coef: 0.5, entropy_coef: 0.01 };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..C6_POINTS {
        let mut params = PolicyParams::init(C6_SIZES[0], &C6_SIZES[1..], C6_ACTIONS, &mut rng);
        let mut flat = params.flat();
        for p in flat.iter_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        params.set_flat(&flat);
        let n_policy = params.policy.params().len();
        let obs: Vec<Vec<f64>> = (0..4).map(|_| (0..C6_SIZES[0]).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut batch = Vec::new();
        for o in &obs {
            let probs = params.probabilities(o).unwrap();
            let action = rng.random_range(0..C6_ACTIONS);
            // Keep ratios away from the clip kinks where the loss is not
            // differentiable.
            let old_log_prob = loop {
                let lp = probs[action].ln() + rng.random_range(-0.4..0.4);
                let r = (probs[action].ln() - lp).exp();
                if (r - (1.0 - coefs.clip)).abs() > 1e-3 && (r - (1.0 + coefs.clip)).abs() > 1e-3 {
                    break lp;
                }
            };
            batch.push(Sample {
                obs: o,
                action,
                old_log_prob,
                advantage: rng.random_range(-2.0..2.0),
                ret: rng.random_range(-2.0..2.0),
            });
        }
        let mut grad = vec![0.0; flat.len()];
        loss_and_grad(&params, &batch, coefs, &mut grad);
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += C6_H;
            let mut minus = flat.clone();
            minus[i] -= C6_H;
            let fd = (naive_loss(&plus, n_policy, &batch, coefs) - naive_loss(&minus, n_policy, &batch, coefs)) / (2.0 * C6_H);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(
        worst < C6_MAX_REL,
        format!("{C6_POINTS} parameter points, {checked} partials (policy and value), max relative error {worst:.3e} < {C6_MAX_REL:e}"),
    )
}

fn fixture_env(max_len: usize, input_seed: u64) -> SpecEnv {
    SpecEnv::new(EnvConfig { max_len, input_seed, action_space: fixture_action_space(), ..EnvConfig::default() }).unwrap()
}

fn c7_discovery(reports: &mut Vec<ViolationReport>) -> Outcome {
    let t = Instant::now();
    let mut ppo = Vec::new();
    let mut uniform = Vec::new();
    for seed in 0..C7_SEEDS {
        let cfg = TrainerConfig { total_steps: C7_BUDGET, seed, stop_at_first_leak: true, ..TrainerConfig::default() };
        let a = train(&mut fixture_env(C7_MAX_LEN, seed), &cfg).unwrap();
        let b = random_search_with(&mut fixture_env(C7_MAX_LEN, seed), &cfg).unwrap();
        reports.extend(a.leaks.iter().chain(&b.leaks).map(|l| l.report.clone()));
        ppo.push(a.first_leak_step);
        uniform.push(b.first_leak_step);
    }
    let found = ppo.iter().filter(|s| s.is_some()).count();
    let censor = |v: &[Option<u64>]| v.iter().map(|s| s.unwrap_or(C7_BUDGET) as f64).collect::<Vec<_>>();
    let (m_ppo, m_uni) = (median(&censor(&ppo)), median(&censor(&uniform)));
    let elapsed = t.elapsed();
    outcome(
        found >= C7_MIN_FOUND && m_ppo <= m_uni && elapsed < C7_TIME,
        format!(
            "PPO found a leak in {found}/{C7_SEEDS} seeds, steps-to-first-leak {:?}, median {m_ppo} <= uniform median {m_uni} {:?}, {elapsed:.2?}",
            censor(&ppo),
            censor(&uniform)
        ),
    )
}

fn c8_scaling() -> Outcome {
    let t = Instant::now();
    let env = EnvConfig { input_seed: SEED, action_space: fixture_action_space(), ..EnvConfig::default() };
    let base = ExperimentConfig {
        seed: SEED,
        env,
        sizes: C8_SIZES.to_vec(),
        fuzz_budget: C8_FUZZ_BUDGET,
        rl_budget: C7_BUDGET,
        ..ExperimentConfig::default()
    };
    let fuzz = campaign(&ExperimentConfig { trials: C8_FUZZ_TRIALS, ..base.clone() }, &[Method::Fuzz]).unwrap();
    let rl = campaign(&ExperimentConfig { trials: C8_RL_TRIALS, ..base }, &[Method::Rl]).unwrap();
    let fm: Vec<f64> = fuzz.stats.iter().map(|s| s.median).collect();
    let rm: Vec<f64> = rl.stats.iter().map(|s| s.median).collect();
    let monotone = fm.windows(2).all(|w| w[0] <= w[1]);
    let growth = fm[fm.len() - 1] / fm[0];
    let slope = log_log_slope(&C8_SIZES.iter().zip(&rm).map(|(&m, &y)| (m as f64, y)).collect::<Vec<_>>());
    let censored: Vec<usize> = fuzz.stats.iter().map(|s| s.trials - s.uncensored()).collect();
    let elapsed = t.elapsed();
    outcome(
        monotone && growth >= C8_MIN_GROWTH && slope <= C8_MAX_SLOPE && elapsed < C8_TIME,
        format!(
            "fuzz medians {fm:?} over n={C8_SIZES:?} (censored at {C8_FUZZ_BUDGET}: {censored:?}), growth {growth:.1}x >= {C8_MIN_GROWTH}x; \
             RL medians {rm:?}, log-log slope {slope:.2} <= {C8_MAX_SLOPE}; {elapsed:.2?}"
        ),
    )
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("specgym").chain(args.iter().copied()))
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let cfg = serde_json::json!({
        "env": {"max_len": 12, "action_space": {"instructions":
            ["SBB R0, R0", "JNS +2", "SBB R1, [BASE+R2]", "JNS -2", "JMP +2", "JMP -2"]}},
        "trainer": {"total_steps": 2048, "horizon": 256},
        "sizes": [4, 8], "trials": 3, "fuzz_budget": 2000, "rl_budget": 2000
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let mut mismatched = Vec::new();
    let mut codes = Vec::new();
    for (cmd, file) in [("train", "training.jsonl"), ("fuzz", "fuzz.csv"), ("scaling", "scaling.csv")] {
        let outs: Vec<_> = (0..2).map(|k| dir.path().join(format!("{cmd}{k}"))).collect();
        for o in &outs {
            codes.push(cli(&["--config", config.to_str().unwrap(), "--seed", "9", "--out", o.to_str().unwrap(), cmd]));
        }
        let read = |d: &Path| fs::read(d.join(file)).unwrap_or_default();
        let (a, b) = (read(&outs[0]), read(&outs[1]));
        if a.is_empty() || a != b {
            mismatched.push(file);
        }
    }
    outcome(
        codes.iter().all(|&c| c == 0) && mismatched.is_empty(),
        format!("train/fuzz/scaling run twice: exit codes {codes:?}, differing outputs {mismatched:?}"),
    )
}

fn report(id: usize, name: &str, o: &Outcome, failures: &mut usize) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        *failures += 1;
    }
    println!("[{tag}] criterion {id} {name}: {}", o.detail);
}

fn main() {
    let mut failures = 0;
    let mut reports = Vec::new();
    report(1, "planted-leak oracle", &c1_fixture(&mut reports), &mut failures);
    let (c2, c3) = c2_c3_invisibility();
    report(2, "transient invisibility", &c2, &mut failures);
    report(3, "counter identity", &c3, &mut failures);
    let c5 = c5_boost();
    let c6 = c6_gradients();
    let c7 = c7_discovery(&mut reports);
    let c4 = c4_soundness(&reports);
    report(4, "detector soundness", &c4, &mut failures);
    report(5, "boost validity", &c5, &mut failures);
    report(6, "PPO gradient check", &c6, &mut failures);
    report(7, "RL discovery", &c7, &mut failures);
    report(8, "scaling study", &c8_scaling(), &mut failures);
    report(9, "determinism", &c9_determinism(), &mut failures);
    println!("acceptance: {} passed, {failures} failed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
