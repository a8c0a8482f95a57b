use specgym::agent::{random_search_with, train, OptimizerKind, TrainerConfig};
use specgym::env::{EnvConfig, SpecEnv};
use specgym::harness::fixture_action_space;

fn env() -> SpecEnv {
    SpecEnv::new(EnvConfig { max_len: 12, action_space: fixture_action_space(), ..EnvConfig::default() }).unwrap()
}

fn tail_reward(log: &specgym::agent::TrainingLog) -> f64 {
    let tail: Vec<f64> = log.iterations.iter().rev().take(4).filter_map(|r| r.mean_episode_reward).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
fn ppo_improves_on_uniform_policy() {
    let cfg = TrainerConfig { total_steps: 16_384, optimizer: OptimizerKind::Adam, seed: 0, ..TrainerConfig::default() };
    let ppo = train(&mut env(), &cfg).unwrap();
    let base = random_search_with(&mut env(), &cfg).unwrap();
    let (r_ppo, r_base) = (tail_reward(&ppo), tail_reward(&base));
    assert!(r_ppo > r_base + 50.0, "ppo {r_ppo} vs uniform {r_base}");
    let ent: Vec<f64> = ppo.iterations.iter().filter_map(|r| r.losses.map(|l| l.entropy)).collect();
    assert!(ent.last().unwrap() < &(0.5 * ent[0]));
}
