//! Collision-free joint-action oracle: prioritized space-time A* over a
//! reservation table, with random priority restarts and a NOOP fallback.

use crate::env::{resolve_moves, Action, SimState};
use crate::map::{Cell, GridMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("goal {goal:?} unreachable from {start:?}")]
    Unreachable { start: Cell, goal: Cell },
}

/// Shortest 4-connected path from `start` to `goal`, returned as the cells
/// after `start` (empty when already there). Ties broken by (f, h, row, col).
pub fn astar_single(map: &GridMap, start: Cell, goal: Cell) -> Result<Vec<Cell>, PlanError> {
    if start == goal {
        return Ok(Vec::new());
    }
    let key = |c: Cell| c.y * map.width() + c.x;
    let h = |c: Cell| c.manhattan(goal);
    let mut open: BinaryHeap<Reverse<(usize, usize, usize, usize)>> = BinaryHeap::new();
    let mut g = vec![usize::MAX; map.width() * map.height()];
    let mut parent: HashMap<usize, Cell> = HashMap::new();
    g[key(start)] = 0;
    open.push(Reverse((h(start), h(start), start.y, start.x)));
    while let Some(Reverse((f, _, y, x))) = open.pop() {
        let cur = Cell::new(x, y);
        let gc = g[key(cur)];
        if f != gc + h(cur) {
            continue; // stale entry
        }
        if cur == goal {
            let mut path = vec![cur];
            let mut c = cur;
            while let Some(&p) = parent.get(&key(c)) {
                if p == start {
                    break;
                }
                path.push(p);
                c = p;
            }
            path.reverse();
            return Ok(path);
        }
        for n in map.neighbors4(cur) {
            let ng = gc + 1;
            if ng < g[key(n)] {
                g[key(n)] = ng;
                parent.insert(key(n), cur);
                open.push(Reverse((ng + h(n), h(n), n.y, n.x)));
            }
        }
    }
    Err(PlanError::Unreachable { start, goal })
}

/// True-distance field to `goal` over free cells (usize::MAX = unreachable).
pub fn distance_field(map: &GridMap, goal: Cell) -> Vec<usize> {
    let mut dist = vec![usize::MAX; map.width() * map.height()];
    let key = |c: Cell| c.y * map.width() + c.x;
    let mut queue = std::collections::VecDeque::new();
    dist[key(goal)] = 0;
    queue.push_back(goal);
    while let Some(c) = queue.pop_front() {
        for n in map.neighbors4(c) {
            if dist[key(n)] == usize::MAX {
                dist[key(n)] = dist[key(c)] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Space-time occupancy ledger: vertex (cell, t) and edge (from, to, t)
/// reservations for already-planned agents.
#[derive(Debug, Default, Clone)]
pub struct ReservationTable {
    vertex: HashSet<(Cell, u32)>,
    edge: HashSet<(Cell, Cell, u32)>,
}

impl ReservationTable {
    pub fn reserve_path(&mut self, path: &[Cell]) {
        for (t, &c) in path.iter().enumerate() {
            self.vertex.insert((c, t as u32));
            if t > 0 {
                self.edge.insert((path[t - 1], c, t as u32));
            }
        }
    }

    pub fn vertex_free(&self, c: Cell, t: u32) -> bool {
        !self.vertex.contains(&(c, t))
    }

    pub fn edge_free(&self, from: Cell, to: Cell, t: u32) -> bool {
        // an edge conflict is the reverse traversal at the same step
        !self.edge.contains(&(to, from, t))
    }

    pub fn goal_clear_after(&self, goal: Cell, t: u32, horizon: u32) -> bool {
        (t + 1..=horizon).all(|tt| self.vertex_free(goal, tt))
    }
}

/// Per-agent position sequences of equal length `horizon + 1` (index 0 is
/// the current position). Executing the first step is always collision-free.
#[derive(Debug, Clone)]
pub struct ExpertPlan {
    pub paths: Vec<Vec<Cell>>,
    pub horizon: u32,
}

impl ExpertPlan {
    pub fn first_actions(&self) -> Vec<Action> {
        self.paths
            .iter()
            .map(|p| {
                if p.len() < 2 {
                    return Action::Noop;
                }
                action_between(p[0], p[1])
            })
            .collect()
    }
}

fn action_between(from: Cell, to: Cell) -> Action {
    let dx = to.x as i64 - from.x as i64;
    let dy = to.y as i64 - from.y as i64;
    match (dx, dy) {
        (-1, 0) => Action::Left,
        (1, 0) => Action::Right,
        (0, -1) => Action::Up,
        (0, 1) => Action::Down,
        _ => Action::Noop,
    }
}

const WAIT_COST: f64 = 0.01;
const RESTARTS: usize = 8;
const OCCUPANCY_COST: f64 = 0.05;

/// Space-time A* for one agent against the reservation table. Returns a
/// position sequence of length `horizon + 1`, or None when no conflict-free
/// route to the goal fits the horizon.
fn astar_space_time(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    horizon: u32,
    table: &ReservationTable,
    dist: &[usize],
    occupied: &HashSet<Cell>,
) -> Option<Vec<Cell>> {
    let key = |c: Cell| c.y * map.width() + c.x;
    if dist[key(start)] == usize::MAX {
        return None;
    }
    // order encodes (f, h) scaled to integers to keep the heap total-ordered;
    // wait moves pay a small surcharge so progress wins ties
    let scale = |v: f64| (v * 100.0).round() as i64;
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    struct Entry {
        f: i64,
        h: usize,
        t: u32,
        y: usize,
        x: usize,
    }
    let mut open: BinaryHeap<Reverse<Entry>> = BinaryHeap::new();
    let mut best_g: HashMap<(Cell, u32), i64> = HashMap::new();
    let mut parent: HashMap<(Cell, u32), Cell> = HashMap::new();
    let h0 = dist[key(start)];
    best_g.insert((start, 0), 0);
    open.push(Reverse(Entry { f: scale(h0 as f64), h: h0, t: 0, y: start.y, x: start.x }));
    while let Some(Reverse(e)) = open.pop() {
        let cur = Cell::new(e.x, e.y);
        let g = *best_g.get(&(cur, e.t)).unwrap();
        if e.f != g + scale(dist[key(cur)] as f64) {
            continue;
        }
        if cur == goal && table.goal_clear_after(goal, e.t, horizon) {
            // rebuild, then pad with waiting at the goal
            let mut path = vec![cur];
            let mut c = cur;
            let mut t = e.t;
            while t > 0 {
                let p = parent[&(c, t)];
                path.push(p);
                c = p;
                t -= 1;
            }
            path.reverse();
            while path.len() < horizon as usize + 1 {
                path.push(goal);
            }
            return Some(path);
        }
        if e.t == horizon {
            continue;
        }
        let nt = e.t + 1;
        let mut succ = map.neighbors4(cur);
        succ.push(cur);
        for n in succ {
            if dist[key(n)] == usize::MAX {
                continue;
            }
            if !table.vertex_free(n, nt) || !table.edge_free(cur, n, nt) {
                continue;
            }
            let mut step_cost = if n == cur { 1.0 + WAIT_COST } else { 1.0 };
            // steer around cells other agents currently occupy so that
            // repeated replanning does not oscillate between mirrored routes
            if n != cur && occupied.contains(&n) {
                step_cost += OCCUPANCY_COST;
            }
            let ng = g + scale(step_cost);
            if best_g.get(&(n, nt)).map_or(true, |&old| ng < old) {
                best_g.insert((n, nt), ng);
                parent.insert((n, nt), cur);
                let hh = dist[key(n)];
                open.push(Reverse(Entry { f: ng + scale(hh as f64), h: hh, t: nt, y: n.y, x: n.x }));
            }
        }
    }
    None
}

fn try_order(
    state: &SimState,
    order: &[usize],
    horizon: u32,
    dists: &[Vec<usize>],
) -> Option<Vec<Vec<Cell>>> {
    let n = state.n_agents();
    let mut table = ReservationTable::default();
    let mut paths: Vec<Vec<Cell>> = vec![Vec::new(); n];
    for &i in order {
        let a = &state.agents[i];
        let occupied: HashSet<Cell> = state
            .agents
            .iter()
            .filter(|b| b.id != i)
            .map(|b| b.pos)
            .collect();
        let path = astar_space_time(&state.map, a.pos, a.goal, horizon, &table, &dists[i], &occupied)?;
        table.reserve_path(&path);
        paths[i] = path;
    }
    Some(paths)
}

/// Free-cell count below which the two-agent coupled planner is used.
const JOINT_CELL_LIMIT: usize = 400;

/// Exact coupled Dijkstra for two agents over joint states
/// `(pos0, pos1, arrived0, arrived1)`. Each timestep costs one unit per
/// agent that has not yet arrived; arrived agents hold their goal cell and
/// act as obstacles. Minimizing this cost minimizes the sum of arrival
/// times. Returns per-agent paths (cells after the start, padded to the
/// horizon by holding), or `None` when no plan fits within the horizon.
fn joint_plan_two(state: &SimState, horizon: u32) -> Option<Vec<Vec<Cell>>> {
    let map = &state.map;
    let key = |c: Cell| c.y * map.width() + c.x;
    let s = [state.agents[0].pos, state.agents[1].pos];
    let g = [state.agents[0].goal, state.agents[1].goal];
    type JKey = (usize, usize, bool, bool);
    let start: JKey = (key(s[0]), key(s[1]), s[0] == g[0], s[1] == g[1]);
    let mut dist: HashMap<JKey, u32> = HashMap::new();
    let mut parent: HashMap<JKey, JKey> = HashMap::new();
    let mut open: BinaryHeap<Reverse<(u32, JKey)>> = BinaryHeap::new();
    dist.insert(start, 0);
    open.push(Reverse((0, start)));
    let cap = 2 * horizon;
    let mut goal_key: Option<JKey> = None;
    while let Some(Reverse((d, k))) = open.pop() {
        if dist.get(&k) != Some(&d) {
            continue;
        }
        let (k0, k1, f0, f1) = k;
        if f0 && f1 {
            goal_key = Some(k);
            break;
        }
        let step_cost = (!f0 as u32) + (!f1 as u32);
        if d + step_cost > cap {
            continue;
        }
        let p0 = Cell::new(k0 % map.width(), k0 / map.width());
        let p1 = Cell::new(k1 % map.width(), k1 / map.width());
        let moves = |p: Cell, frozen: bool| -> Vec<Cell> {
            if frozen {
                vec![p]
            } else {
                let mut m = map.neighbors4(p);
                m.push(p);
                m
            }
        };
        for n0 in moves(p0, f0) {
            for n1 in moves(p1, f1).into_iter() {
                if n0 == n1 || (n0 == p1 && n1 == p0) {
                    continue;
                }
                let nk: JKey = (key(n0), key(n1), f0 || n0 == g[0], f1 || n1 == g[1]);
                let nd = d + step_cost;
                if dist.get(&nk).is_none_or(|&old| nd < old) {
                    dist.insert(nk, nd);
                    parent.insert(nk, k);
                    open.push(Reverse((nd, nk)));
                }
            }
        }
    }
    let mut states = vec![goal_key?];
    while let Some(&p) = parent.get(states.last().unwrap()) {
        states.push(p);
        if p == start {
            break;
        }
    }
    states.reverse();
    if states.len() as u32 > horizon + 1 {
        return None;
    }
    let mut paths = vec![Vec::new(), Vec::new()];
    for &(k0, k1, _, _) in &states {
        paths[0].push(Cell::new(k0 % map.width(), k0 / map.width()));
        paths[1].push(Cell::new(k1 % map.width(), k1 / map.width()));
    }
    for (i, path) in paths.iter_mut().enumerate() {
        let last = *path.last().unwrap();
        if last != g[i] {
            return None;
        }
        // arrived agents hold their goal for the rest of the horizon
        while (path.len() as u32) < horizon + 1 {
            path.push(last);
        }
        debug_assert_eq!(path[0], s[i]);
    }
    Some(paths)
}

/// Prioritized space-time planning: agents sorted by distance-to-goal
/// descending (id tie-break), random priority restarts on failure, and a
/// conflict-sanitized NOOP fallback so the first step is always legal.
/// Two-agent instances on small maps are solved exactly with a coupled
/// search instead.
pub fn plan_expert(state: &SimState, horizon: u32) -> ExpertPlan {
    let n = state.n_agents();
    if n == 2 && state.map.free_cells().len() <= JOINT_CELL_LIMIT {
        if let Some(paths) = joint_plan_two(state, horizon) {
            return ExpertPlan { paths, horizon };
        }
    }
    let dists: Vec<Vec<usize>> = state
        .agents
        .iter()
        .map(|a| distance_field(&state.map, a.goal))
        .collect();
    let key = |c: Cell| c.y * state.map.width() + c.x;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| {
        let d = dists[i][key(state.agents[i].pos)];
        // agents already on their goal hold position and plan first so
        // that others route around them instead of pushing them off
        let holding = d == 0;
        (!holding, Reverse(if d == usize::MAX { 0 } else { d }), i)
    });

    let mut found = try_order(state, &order, horizon, &dists);
    if found.is_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed ^ state.t as u64);
        for _ in 0..RESTARTS {
            order.shuffle(&mut rng);
            found = try_order(state, &order, horizon, &dists);
            if found.is_some() {
                break;
            }
        }
    }
    let paths = match found {
        Some(p) => p,
        None => fallback_paths(state, horizon, &dists),
    };
    ExpertPlan { paths, horizon }
}

/// Plan each agent independently where possible, then cancel any move whose
/// first step conflicts. Unplannable agents hold position.
fn fallback_paths(state: &SimState, horizon: u32, dists: &[Vec<usize>]) -> Vec<Vec<Cell>> {
    let n = state.n_agents();
    let mut table = ReservationTable::default();
    let mut paths: Vec<Vec<Cell>> = Vec::with_capacity(n);
    for i in 0..n {
        let a = &state.agents[i];
        let occupied: HashSet<Cell> = state
            .agents
            .iter()
            .filter(|b| b.id != i)
            .map(|b| b.pos)
            .collect();
        let path = astar_space_time(&state.map, a.pos, a.goal, horizon, &table, &dists[i], &occupied)
            .unwrap_or_else(|| vec![a.pos; horizon as usize + 1]);
        table.reserve_path(&path);
        paths.push(path);
    }
    // sanitize the first step: any would-be collision becomes a hold
    let positions: Vec<Cell> = state.agents.iter().map(|a| a.pos).collect();
    let plan = ExpertPlan { paths: paths.clone(), horizon };
    let actions = plan.first_actions();
    let (_, collided) = resolve_moves(&state.map, &positions, &actions);
    for i in 0..n {
        if collided[i] {
            paths[i] = vec![positions[i]; horizon as usize + 1];
        }
    }
    paths
}

/// Default lookahead: twice the map "diameter" (height + width).
pub fn default_horizon(map: &GridMap) -> u32 {
    (2 * (map.height() + map.width())) as u32
}

/// First step of the expert plan, for imitation targets and baseline play.
pub fn expert_actions(state: &SimState) -> Vec<Action> {
    plan_expert(state, default_horizon(&state.map)).first_actions()
}
