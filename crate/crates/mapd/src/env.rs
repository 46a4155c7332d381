//! Lifelong pickup-and-delivery simulator with synchronous transitions,
//! collision cancellation and configurable reward modes.

use crate::map::{Cell, GridMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete action set: 0 NOOP, 1 LEFT, 2 RIGHT, 3 UP, 4 DOWN.
pub const N_ACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Noop = 0,
    Left = 1,
    Right = 2,
    Up = 3,
    Down = 4,
}

impl Action {
    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0 => Some(Action::Noop),
            1 => Some(Action::Left),
            2 => Some(Action::Right),
            3 => Some(Action::Up),
            4 => Some(Action::Down),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Noop => (0, 0),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
        }
    }

    pub const ALL: [Action; 5] = [Action::Noop, Action::Left, Action::Right, Action::Up, Action::Down];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WorkState {
    Picking,
    Dropping,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub release_time: u32,
    pub pickup: Cell,
    pub drop: Cell,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentState {
    pub id: usize,
    pub pos: Cell,
    pub goal: Cell,
    pub work_state: WorkState,
    /// Index of the next order to pull from this agent's queue.
    pub order_idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    Global,
    Individual,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// +5 on pickup, +5 on drop.
    TwoStage,
    /// 0 on pickup, +10 on drop.
    DropOnly,
}

impl Scenario {
    pub fn pickup_bonus(self) -> f64 {
        match self {
            Scenario::TwoStage => 5.0,
            Scenario::DropOnly => 0.0,
        }
    }

    pub fn drop_bonus(self) -> f64 {
        match self {
            Scenario::TwoStage => 5.0,
            Scenario::DropOnly => 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// Weight of the individual term in PARTIAL mode.
    pub mix_alpha: f64,
    pub scenario: Scenario,
    pub step_penalty: f64,
    pub collision_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            mode: RewardMode::Individual,
            mix_alpha: 0.5,
            scenario: Scenario::TwoStage,
            step_penalty: -0.3,
            collision_penalty: -2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Event {
    Moved,
    Stayed,
    Collided,
    ReachedPickup,
    ReachedDrop,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub events: Vec<Event>,
    /// Reach events (pickup or drop) this step.
    pub done_goals: usize,
    /// Completed deliveries this step.
    pub done_orders: usize,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{requested} agents requested but only {free} free cells")]
    TooManyAgents { requested: usize, free: usize },
    #[error("map has no free cells")]
    NoFreeCells,
    #[error("joint action has length {got}, expected {expected}")]
    BadActionLength { expected: usize, got: usize },
    #[error("action value {0} outside 0..=4")]
    BadActionValue(usize),
}

/// Full simulator state. Cloning yields an independent rollout branch.
#[derive(Debug, Clone)]
pub struct SimState {
    pub map: GridMap,
    pub agents: Vec<AgentState>,
    pub t: u32,
    /// Per-agent order queues, consumed in index order.
    pub orders: Vec<Vec<Order>>,
    pub goals_completed: u64,
    pub orders_completed: u64,
    pub rng_seed: u64,
}

impl SimState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    fn assign_next_order(&mut self, agent: usize) {
        let a = &self.agents[agent];
        match self.orders[agent].get(a.order_idx) {
            Some(order) if order.release_time <= self.t => {
                let pickup = order.pickup;
                let a = &mut self.agents[agent];
                a.goal = pickup;
                a.work_state = WorkState::Picking;
            }
            _ => {
                let pos = self.agents[agent].pos;
                let a = &mut self.agents[agent];
                a.goal = pos;
                a.work_state = WorkState::Idle;
            }
        }
    }
}

/// Place `n_agents` uniformly without replacement on free cells and assign
/// first released orders. Deterministic in `seed`.
pub fn reset(map: &GridMap, n_agents: usize, orders: &[Vec<Order>], seed: u64) -> Result<SimState, EnvError> {
    let free = map.free_cells();
    if free.is_empty() {
        return Err(EnvError::NoFreeCells);
    }
    if n_agents > free.len() {
        return Err(EnvError::TooManyAgents { requested: n_agents, free: free.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = free;
    cells.shuffle(&mut rng);
    let agents = (0..n_agents)
        .map(|id| AgentState {
            id,
            pos: cells[id],
            goal: cells[id],
            work_state: WorkState::Idle,
            order_idx: 0,
        })
        .collect();
    let mut queues: Vec<Vec<Order>> = orders.to_vec();
    queues.resize(n_agents, Vec::new());
    let mut state = SimState {
        map: map.clone(),
        agents,
        t: 0,
        orders: queues,
        goals_completed: 0,
        orders_completed: 0,
        rng_seed: seed,
    };
    for i in 0..n_agents {
        state.assign_next_order(i);
    }
    Ok(state)
}

/// Resolve intended moves into final positions. Returns `(new_pos, collided)`
/// per agent. Moves into obstacles or off-grid, vertex conflicts, edge swaps
/// and chains blocked by stationary agents are all cancelled.
pub fn resolve_moves(map: &GridMap, positions: &[Cell], actions: &[Action]) -> (Vec<Cell>, Vec<bool>) {
    let n = positions.len();
    let mut collided = vec![false; n];
    let mut target: Vec<Cell> = Vec::with_capacity(n);
    for i in 0..n {
        let (dx, dy) = actions[i].delta();
        let (tx, ty) = (positions[i].x as i64 + dx, positions[i].y as i64 + dy);
        if actions[i] != Action::Noop && !map.is_free_xy(tx, ty) {
            collided[i] = true;
            target.push(positions[i]);
        } else {
            target.push(Cell::new(tx.max(0) as usize, ty.max(0) as usize));
        }
    }
    // moving = still attempting its intended move
    let mut moving: Vec<bool> = (0..n).map(|i| !collided[i] && target[i] != positions[i]).collect();
    loop {
        let mut cancelled = Vec::new();
        for i in 0..n {
            if !moving[i] {
                continue;
            }
            for j in 0..n {
                if i == j {
                    continue;
                }
                let tj = if moving[j] { target[j] } else { positions[j] };
                // vertex conflict or blocked by a stationary agent
                if target[i] == tj {
                    cancelled.push(i);
                    break;
                }
                // edge swap
                if moving[j] && target[i] == positions[j] && target[j] == positions[i] {
                    cancelled.push(i);
                    break;
                }
            }
        }
        if cancelled.is_empty() {
            break;
        }
        for i in cancelled {
            moving[i] = false;
            collided[i] = true;
        }
    }
    let finals = (0..n).map(|i| if moving[i] { target[i] } else { positions[i] }).collect();
    (finals, collided)
}

/// Advance the simulator by one synchronous joint step.
pub fn step(state: &mut SimState, joint_action: &[Action], cfg: &RewardConfig) -> Result<StepOutcome, EnvError> {
    let n = state.n_agents();
    if joint_action.len() != n {
        return Err(EnvError::BadActionLength { expected: n, got: joint_action.len() });
    }
    let positions: Vec<Cell> = state.agents.iter().map(|a| a.pos).collect();
    let (finals, collided) = resolve_moves(&state.map, &positions, joint_action);

    state.t += 1;
    let mut rewards = vec![0.0; n];
    let mut events = Vec::with_capacity(n);
    let mut done_goals = 0;
    let mut done_orders = 0;
    for i in 0..n {
        state.agents[i].pos = finals[i];
        let event = if collided[i] {
            rewards[i] = cfg.collision_penalty;
            Event::Collided
        } else {
            rewards[i] = cfg.step_penalty;
            if finals[i] == positions[i] { Event::Stayed } else { Event::Moved }
        };
        let mut event = event;
        if !collided[i] && state.agents[i].pos == state.agents[i].goal {
            match state.agents[i].work_state {
                WorkState::Picking => {
                    rewards[i] += cfg.scenario.pickup_bonus();
                    event = Event::ReachedPickup;
                    done_goals += 1;
                    state.goals_completed += 1;
                    let order = state.orders[i][state.agents[i].order_idx];
                    state.agents[i].goal = order.drop;
                    state.agents[i].work_state = WorkState::Dropping;
                }
                WorkState::Dropping => {
                    rewards[i] += cfg.scenario.drop_bonus();
                    event = Event::ReachedDrop;
                    done_goals += 1;
                    done_orders += 1;
                    state.goals_completed += 1;
                    state.orders_completed += 1;
                    state.agents[i].order_idx += 1;
                    state.assign_next_order(i);
                }
                WorkState::Idle => {}
            }
        }
        events.push(event);
    }
    // idle agents may now have a released order
    for i in 0..n {
        if state.agents[i].work_state == WorkState::Idle {
            state.assign_next_order(i);
        }
    }
    let rewards = apply_reward_mode(&rewards, cfg);
    Ok(StepOutcome { rewards, events, done_goals, done_orders })
}

/// GLOBAL shares the summed reward, INDIVIDUAL is identity, PARTIAL mixes
/// own reward with the sum of the others.
pub fn apply_reward_mode(raw: &[f64], cfg: &RewardConfig) -> Vec<f64> {
    match cfg.mode {
        RewardMode::Individual => raw.to_vec(),
        RewardMode::Global => {
            let total: f64 = raw.iter().sum();
            vec![total; raw.len()]
        }
        RewardMode::Partial => {
            let total: f64 = raw.iter().sum();
            raw.iter()
                .map(|&r| cfg.mix_alpha * r + (1.0 - cfg.mix_alpha) * (total - r))
                .collect()
        }
    }
}

/// Validate raw action indices into typed actions.
pub fn parse_joint_action(indices: &[usize], n_agents: usize) -> Result<Vec<Action>, EnvError> {
    if indices.len() != n_agents {
        return Err(EnvError::BadActionLength { expected: n_agents, got: indices.len() });
    }
    indices
        .iter()
        .map(|&i| Action::from_index(i).ok_or(EnvError::BadActionValue(i)))
        .collect()
}

/// CSV order file: `release_time,pickup_x,pickup_y,drop_x,drop_y,agent`.
/// `agent = -1` assigns rows round-robin over `n_agents`.
pub fn read_orders(text: &str, n_agents: usize) -> Result<Vec<Vec<Order>>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        release_time: u32,
        pickup_x: usize,
        pickup_y: usize,
        drop_x: usize,
        drop_y: usize,
        agent: i64,
    }
    let mut queues = vec![Vec::new(); n_agents];
    let mut rr = 0usize;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    for row in reader.deserialize() {
        let row: Row = row?;
        let order = Order {
            release_time: row.release_time,
            pickup: Cell::new(row.pickup_x, row.pickup_y),
            drop: Cell::new(row.drop_x, row.drop_y),
        };
        let agent = if row.agent < 0 {
            let a = rr % n_agents;
            rr += 1;
            a
        } else {
            row.agent as usize % n_agents
        };
        queues[agent].push(order);
    }
    Ok(queues)
}

pub fn write_orders<W: std::io::Write>(orders: &[(Order, i64)], w: W) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["release_time", "pickup_x", "pickup_y", "drop_x", "drop_y", "agent"])?;
    for (o, agent) in orders {
        writer.write_record(&[
            o.release_time.to_string(),
            o.pickup.x.to_string(),
            o.pickup.y.to_string(),
            o.drop.x.to_string(),
            o.drop.y.to_string(),
            agent.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Sample a stream of random orders over free cells (pickup != drop).
pub fn gen_orders(map: &GridMap, count: usize, seed: u64) -> Vec<Order> {
    let free = map.free_cells();
    assert!(free.len() >= 2, "need at least two free cells for orders");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pickup = *free.choose(&mut rng).unwrap();
        let drop = loop {
            let d = *free.choose(&mut rng).unwrap();
            if d != pickup {
                break d;
            }
        };
        out.push(Order { release_time: 0, pickup, drop });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::load_map;

    fn lifelong_orders(n: usize, map: &GridMap) -> Vec<Vec<Order>> {
        (0..n).map(|i| gen_orders(map, 50, 1000 + i as u64).to_vec()).collect()
    }

    #[test]
    fn reset_forced_placement() {
        let map = load_map(".", "m").unwrap();
        let state = reset(&map, 1, &[vec![]], 7).unwrap();
        assert_eq!(state.agents[0].pos, Cell::new(0, 0));
        assert_eq!(state.agents[0].work_state, WorkState::Idle);
    }

    #[test]
    fn reset_deterministic() {
        let map = GridMap::open(5, 5);
        let orders = lifelong_orders(3, &map);
        let a = reset(&map, 3, &orders, 42).unwrap();
        let b = reset(&map, 3, &orders, 42).unwrap();
        for (x, y) in a.agents.iter().zip(&b.agents) {
            assert_eq!(x.pos, y.pos);
            assert_eq!(x.goal, y.goal);
        }
    }

    #[test]
    fn reset_too_many_agents() {
        let map = GridMap::open(1, 2);
        assert!(matches!(reset(&map, 3, &[], 0), Err(EnvError::TooManyAgents { .. })));
    }

    #[test]
    fn noop_step_penalty() {
        let map = GridMap::open(3, 3);
        let mut state = reset(&map, 1, &[vec![]], 0).unwrap();
        let cfg = RewardConfig::default();
        let out = step(&mut state, &[Action::Noop], &cfg).unwrap();
        assert_eq!(out.events[0], Event::Stayed);
        assert!((out.rewards[0] - (-0.3)).abs() < 1e-12);
    }

    #[test]
    fn swap_collides_and_cancels() {
        let map = GridMap::open(1, 2);
        let mut state = reset(&map, 2, &[vec![], vec![]], 0).unwrap();
        let left_idx = if state.agents[0].pos.x == 0 { 0 } else { 1 };
        let mut actions = [Action::Noop, Action::Noop];
        actions[left_idx] = Action::Right;
        actions[1 - left_idx] = Action::Left;
        let before: Vec<Cell> = state.agents.iter().map(|a| a.pos).collect();
        let cfg = RewardConfig::default();
        let out = step(&mut state, &actions, &cfg).unwrap();
        for i in 0..2 {
            assert_eq!(out.events[i], Event::Collided);
            assert_eq!(state.agents[i].pos, before[i]);
            assert!((out.rewards[i] - (-2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn pickup_reach_reward_and_transition() {
        let map = GridMap::open(1, 3);
        let order = Order { release_time: 0, pickup: Cell::new(1, 0), drop: Cell::new(2, 0) };
        // agent 0 lands on cell (0,0) under seed 2 for this map
        let seed = (0..100u64)
            .find(|&s| reset(&map, 1, &[vec![order]], s).unwrap().agents[0].pos == Cell::new(0, 0))
            .unwrap();
        let mut state = reset(&map, 1, &[vec![order]], seed).unwrap();
        assert_eq!(state.agents[0].work_state, WorkState::Picking);
        let cfg = RewardConfig::default();
        let out = step(&mut state, &[Action::Right], &cfg).unwrap();
        assert_eq!(out.events[0], Event::ReachedPickup);
        assert!((out.rewards[0] - 4.7).abs() < 1e-12);
        assert_eq!(state.agents[0].work_state, WorkState::Dropping);
        assert_eq!(state.agents[0].goal, Cell::new(2, 0));
    }

    #[test]
    fn lifelong_next_order_same_step() {
        let map = GridMap::open(1, 4);
        let orders = vec![
            Order { release_time: 0, pickup: Cell::new(1, 0), drop: Cell::new(2, 0) },
            Order { release_time: 0, pickup: Cell::new(3, 0), drop: Cell::new(0, 0) },
        ];
        let seed = (0..100u64)
            .find(|&s| reset(&map, 1, &[orders.clone()], s).unwrap().agents[0].pos == Cell::new(1, 0))
            .unwrap();
        let mut state = reset(&map, 1, &[orders], seed).unwrap();
        let cfg = RewardConfig::default();
        // already on the pickup cell: a NOOP arrival collects it
        step(&mut state, &[Action::Noop], &cfg).unwrap();
        assert_eq!(state.agents[0].work_state, WorkState::Dropping);
        let out = step(&mut state, &[Action::Right], &cfg).unwrap();
        assert_eq!(out.events[0], Event::ReachedDrop);
        // next order assigned within the same step
        assert_eq!(state.agents[0].work_state, WorkState::Picking);
        assert_eq!(state.agents[0].goal, Cell::new(3, 0));
    }

    #[test]
    fn reward_mode_global() {
        let cfg = RewardConfig { mode: RewardMode::Global, ..Default::default() };
        assert_eq!(apply_reward_mode(&[1.0, 2.0], &cfg), vec![3.0, 3.0]);
    }

    #[test]
    fn reward_mode_partial() {
        let cfg = RewardConfig { mode: RewardMode::Partial, mix_alpha: 0.5, ..Default::default() };
        let out = apply_reward_mode(&[1.0, 2.0, 3.0], &cfg);
        for v in out {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_alpha_one_is_individual() {
        let cfg = RewardConfig { mode: RewardMode::Partial, mix_alpha: 1.0, ..Default::default() };
        let raw = [0.4, -2.0, 4.7];
        assert_eq!(apply_reward_mode(&raw, &cfg), raw.to_vec());
    }

    #[test]
    fn bad_actions_rejected() {
        let map = GridMap::open(2, 2);
        let mut state = reset(&map, 2, &[vec![], vec![]], 0).unwrap();
        let cfg = RewardConfig::default();
        assert!(matches!(step(&mut state, &[Action::Noop], &cfg), Err(EnvError::BadActionLength { .. })));
        assert!(matches!(parse_joint_action(&[0, 7], 2), Err(EnvError::BadActionValue(7))));
    }

    #[test]
    fn chain_block_propagates() {
        // three agents in a row; leftmost pushes right into a stationary chain
        let map = GridMap::open(1, 3);
        let mut state = reset(&map, 3, &[vec![], vec![], vec![]], 0).unwrap();
        // normalize positions by id order for the test
        let mut ids: Vec<usize> = (0..3).collect();
        ids.sort_by_key(|&i| state.agents[i].pos.x);
        let mut actions = vec![Action::Noop; 3];
        actions[ids[0]] = Action::Right;
        actions[ids[1]] = Action::Right;
        // rightmost stays; middle blocked by it; left blocked by middle
        let cfg = RewardConfig::default();
        let before: Vec<Cell> = state.agents.iter().map(|a| a.pos).collect();
        let out = step(&mut state, &actions, &cfg).unwrap();
        for i in [ids[0], ids[1]] {
            assert_eq!(out.events[i], Event::Collided);
            assert_eq!(state.agents[i].pos, before[i]);
        }
        assert_eq!(out.events[ids[2]], Event::Stayed);
    }
}
