//! Evaluation harness: pluggable step policies, lifelong and one-shot
//! protocols, seed-aggregated reports, and wall-clock measurement.

use crate::env::{
    parse_joint_action, reset, resolve_moves, step, Action, Event, Order, RewardConfig, SimState,
    WorkState,
};
use crate::expert::expert_actions;
use crate::map::GridMap;
use crate::obs::{build_observation, predicted_paths, ObsContext};
use crate::policy::infer::{sample_joint, HiddenState, SampleMode};
use crate::policy::{ParamStore, PolicyConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

pub const EVAL_REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("observation error: {0}")]
    Obs(#[from] crate::obs::ObsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A joint step policy. Implementations may keep internal memory; it is
/// reset between seeds by constructing a fresh policy. `Send` so per-seed
/// episodes can run on worker threads.
pub trait Policy: Send {
    fn name(&self) -> &str;
    fn joint_action(&mut self, state: &SimState) -> Vec<Action>;
}

/// Wraps a policy and accumulates wall time spent in `joint_action`.
struct Timed<'a> {
    inner: &'a mut dyn Policy,
    total: std::time::Duration,
    calls: usize,
}

impl<'a> Timed<'a> {
    fn new(inner: &'a mut dyn Policy) -> Self {
        Timed { inner, total: std::time::Duration::ZERO, calls: 0 }
    }

    fn mean_seconds(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.total.as_secs_f64() / self.calls as f64
        }
    }
}

impl Policy for Timed<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn joint_action(&mut self, state: &SimState) -> Vec<Action> {
        let start = Instant::now();
        let out = self.inner.joint_action(state);
        self.total += start.elapsed();
        self.calls += 1;
        out
    }
}

/// Uniform random actions, seeded.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn joint_action(&mut self, state: &SimState) -> Vec<Action> {
        let idx: Vec<usize> =
            (0..state.n_agents()).map(|_| self.rng.gen_range(0..5)).collect();
        parse_joint_action(&idx, state.n_agents()).unwrap()
    }
}

/// The prioritized space-time planner, replanned every step.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn name(&self) -> &str {
        "expert"
    }

    fn joint_action(&mut self, state: &SimState) -> Vec<Action> {
        expert_actions(state)
    }
}

/// Learned policy loaded from a checkpoint; keeps per-agent recurrent
/// state across steps.
pub struct NetworkPolicy {
    store: ParamStore,
    cfg: PolicyConfig,
    hidden: Vec<HiddenState>,
    ctx: Option<ObsContext>,
    mode: SampleMode,
    rng: ChaCha8Rng,
}

impl NetworkPolicy {
    pub fn new(store: ParamStore, cfg: PolicyConfig, mode: SampleMode, seed: u64) -> Self {
        NetworkPolicy {
            store,
            cfg,
            hidden: Vec::new(),
            ctx: None,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn load(stem: &Path, cfg: PolicyConfig, mode: SampleMode, seed: u64) -> std::io::Result<Self> {
        Ok(Self::new(ParamStore::load(stem)?, cfg, mode, seed))
    }
}

impl Policy for NetworkPolicy {
    fn name(&self) -> &str {
        "network"
    }

    fn joint_action(&mut self, state: &SimState) -> Vec<Action> {
        let n = state.n_agents();
        if self.hidden.len() != n {
            self.hidden = (0..n).map(|_| HiddenState::zeros(self.cfg.d)).collect();
        }
        if self.ctx.is_none() {
            self.ctx = Some(ObsContext::new(&state.map));
        }
        let ctx = self.ctx.as_ref().unwrap();
        let paths = predicted_paths(state);
        let obs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                build_observation(state, i, self.cfg.fov, &paths, ctx)
                    .expect("fov validated at construction")
                    .as_slice()
                    .to_vec()
            })
            .collect();
        let decision = sample_joint(
            &self.store,
            &self.cfg,
            &obs,
            &mut self.hidden,
            self.mode,
            &mut self.rng,
        );
        decision
            .actions
            .iter()
            .map(|&a| Action::from_index(a).unwrap())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Lifelong,
    OneShot,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub steps: u32,
    pub goals_completed: u64,
    pub orders_completed: u64,
    /// Goals reached per timestep.
    pub throughput: f64,
    pub total_reward: f64,
    pub collision_events: u64,
    /// Mean wall time of one joint-action call, in seconds.
    pub mean_step_runtime: f64,
    /// Sum over agents of arrival steps; non-arrivals count the step cap.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sum_of_costs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub version: u32,
    pub policy: String,
    pub mode: EvalMode,
    pub n_agents: usize,
    pub steps: u32,
    pub per_seed: Vec<SeedResult>,
    pub mean_throughput: f64,
    pub std_throughput: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_step_runtime: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_sum_of_costs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_lifelong(
    map: &GridMap,
    orders: &[Vec<Order>],
    n_agents: usize,
    steps: u32,
    seed: u64,
    reward_cfg: &RewardConfig,
    policy: &mut dyn Policy,
) -> Result<SeedResult, EvalError> {
    let mut state = reset(map, n_agents, orders, seed)?;
    let mut timed = Timed::new(policy);
    let mut total_reward = 0.0;
    let mut collisions = 0u64;
    for _ in 0..steps {
        let actions = timed.joint_action(&state);
        let out = step(&mut state, &actions, reward_cfg)?;
        total_reward += out.rewards.iter().sum::<f64>();
        collisions += out.events.iter().filter(|e| **e == Event::Collided).count() as u64;
    }
    Ok(SeedResult {
        seed,
        steps,
        goals_completed: state.goals_completed,
        orders_completed: state.orders_completed,
        throughput: state.goals_completed as f64 / steps as f64,
        total_reward,
        collision_events: collisions,
        mean_step_runtime: timed.mean_seconds(),
        sum_of_costs: None,
        success: None,
    })
}

/// Build a one-shot state: each agent owns a single fixed goal (its first
/// order's pickup); order queues are cleared so no reassignment happens.
pub fn one_shot_state(
    map: &GridMap,
    orders: &[Vec<Order>],
    n_agents: usize,
    seed: u64,
) -> Result<SimState, EvalError> {
    let mut state = reset(map, n_agents, orders, seed)?;
    for i in 0..n_agents {
        if let Some(o) = state.orders[i].first() {
            state.agents[i].goal = o.pickup;
            state.agents[i].work_state = WorkState::Picking;
        } else {
            state.agents[i].goal = state.agents[i].pos;
            state.agents[i].work_state = WorkState::Idle;
        }
        state.orders[i].clear();
    }
    Ok(state)
}

/// One-shot rollout: agents move toward fixed goals, arrived agents are
/// frozen in place (their action is forced to hold), and the episode ends
/// when everyone has arrived or at the step cap. Returns per-agent arrival
/// steps clamped to the cap.
pub fn run_one_shot(
    state: &mut SimState,
    steps: u32,
    policy: &mut dyn Policy,
) -> (Vec<u32>, bool) {
    let n = state.n_agents();
    let mut arrival: Vec<Option<u32>> = (0..n)
        .map(|i| (state.agents[i].pos == state.agents[i].goal).then_some(0))
        .collect();
    for t in 1..=steps {
        if arrival.iter().all(|a| a.is_some()) {
            break;
        }
        let mut actions = policy.joint_action(state);
        for (i, arr) in arrival.iter().enumerate() {
            if arr.is_some() {
                actions[i] = Action::Noop;
            }
        }
        let positions: Vec<_> = state.agents.iter().map(|a| a.pos).collect();
        let (finals, _) = resolve_moves(&state.map, &positions, &actions);
        for i in 0..n {
            state.agents[i].pos = finals[i];
            if arrival[i].is_none() && finals[i] == state.agents[i].goal {
                arrival[i] = Some(t);
            }
        }
        state.t += 1;
    }
    let success = arrival.iter().all(|a| a.is_some());
    let arrivals = arrival.into_iter().map(|a| a.unwrap_or(steps)).collect();
    (arrivals, success)
}

fn run_one_shot_seed(
    map: &GridMap,
    orders: &[Vec<Order>],
    n_agents: usize,
    steps: u32,
    seed: u64,
    policy: &mut dyn Policy,
) -> Result<SeedResult, EvalError> {
    let mut state = one_shot_state(map, orders, n_agents, seed)?;
    let mut timed = Timed::new(policy);
    let (arrivals, success) = run_one_shot(&mut state, steps, &mut timed);
    let soc: u32 = arrivals.iter().sum();
    let arrived = arrivals.iter().filter(|&&a| a < steps).count() as u64;
    let mean_step_runtime = timed.mean_seconds();
    Ok(SeedResult {
        seed,
        steps,
        goals_completed: arrived,
        orders_completed: 0,
        throughput: arrived as f64 / steps as f64,
        total_reward: 0.0,
        collision_events: 0,
        mean_step_runtime,
        sum_of_costs: Some(soc as f64),
        success: Some(success),
    })
}

/// Evaluate a policy over seeds; a fresh policy instance per seed keeps
/// recurrent memory from leaking across episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F>(
    map: &GridMap,
    orders: &[Vec<Order>],
    n_agents: usize,
    steps: u32,
    seeds: &[u64],
    mode: EvalMode,
    reward_cfg: &RewardConfig,
    mut make_policy: F,
) -> Result<EvalReport, EvalError>
where
    F: FnMut(u64) -> Box<dyn Policy>,
{
    assert!(!seeds.is_empty(), "need at least one seed");
    // policies are built sequentially, then each seed's episode runs on its
    // own thread against the shared read-only instance
    let mut name = String::new();
    let policies: Vec<(u64, Box<dyn Policy>)> = seeds
        .iter()
        .map(|&s| {
            let p = make_policy(s);
            name = p.name().to_string();
            (s, p)
        })
        .collect();
    let results: Vec<Result<SeedResult, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = policies
            .into_iter()
            .map(|(seed, mut policy)| {
                scope.spawn(move || match mode {
                    EvalMode::Lifelong => run_lifelong(
                        map,
                        orders,
                        n_agents,
                        steps,
                        seed,
                        reward_cfg,
                        policy.as_mut(),
                    ),
                    EvalMode::OneShot => {
                        run_one_shot_seed(map, orders, n_agents, steps, seed, policy.as_mut())
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut per_seed = Vec::with_capacity(seeds.len());
    for r in results {
        per_seed.push(r?);
    }
    let th: Vec<f64> = per_seed.iter().map(|r| r.throughput).collect();
    let rw: Vec<f64> = per_seed.iter().map(|r| r.total_reward).collect();
    let (mean_throughput, std_throughput) = mean_std(&th);
    let (mean_reward, std_reward) = mean_std(&rw);
    let rt: Vec<f64> = per_seed.iter().map(|r| r.mean_step_runtime).collect();
    let (mean_step_runtime, _) = mean_std(&rt);
    let socs: Vec<f64> = per_seed.iter().filter_map(|r| r.sum_of_costs).collect();
    let mean_sum_of_costs = (!socs.is_empty()).then(|| mean_std(&socs).0);
    let successes: Vec<f64> = per_seed
        .iter()
        .filter_map(|r| r.success.map(|s| if s { 1.0 } else { 0.0 }))
        .collect();
    let success_rate = (!successes.is_empty()).then(|| mean_std(&successes).0);
    Ok(EvalReport {
        version: EVAL_REPORT_VERSION,
        policy: name,
        mode,
        n_agents,
        steps,
        per_seed,
        mean_throughput,
        std_throughput,
        mean_reward,
        std_reward,
        mean_step_runtime,
        mean_sum_of_costs,
        success_rate,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("report is serializable");
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Per-seed CSV summary with a trailing aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "seed",
            "steps",
            "goals_completed",
            "orders_completed",
            "throughput",
            "total_reward",
            "collision_events",
            "sum_of_costs",
            "success",
        ])?;
        for r in &self.per_seed {
            w.write_record(&[
                r.seed.to_string(),
                r.steps.to_string(),
                r.goals_completed.to_string(),
                r.orders_completed.to_string(),
                format!("{:.6}", r.throughput),
                format!("{:.6}", r.total_reward),
                r.collision_events.to_string(),
                r.sum_of_costs.map_or(String::new(), |v| format!("{v:.1}")),
                r.success.map_or(String::new(), |s| s.to_string()),
            ])?;
        }
        w.write_record(&[
            "mean".to_string(),
            self.steps.to_string(),
            String::new(),
            String::new(),
            format!("{:.6}", self.mean_throughput),
            format!("{:.6}", self.mean_reward),
            String::new(),
            self.mean_sum_of_costs.map_or(String::new(), |v| format!("{v:.2}")),
            self.success_rate.map_or(String::new(), |v| format!("{v:.2}")),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Mean seconds per `f()` call over `repeats`, after `warmup` unmeasured
/// calls.
pub fn measure_runtime<F: FnMut()>(mut f: F, warmup: usize, repeats: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let start = Instant::now();
    for _ in 0..repeats {
        f();
    }
    start.elapsed().as_secs_f64() / repeats.max(1) as f64
}
