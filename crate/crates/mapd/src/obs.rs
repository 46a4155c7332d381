//! Per-agent 13-channel field-of-view observation stacks.

use crate::env::{SimState, WorkState};
use crate::map::{Cell, CorridorIndex, GridMap};
use serde::Serialize;
use thiserror::Error;

pub const N_CHANNELS: usize = 13;

pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "obstacles",
    "own_goal",
    "own_state",
    "other_positions",
    "other_goals",
    "other_states",
    "own_path_3",
    "others_t1",
    "others_t2",
    "others_t3",
    "corridor_endpoint_dx",
    "corridor_endpoint_dy",
    "corridor_blocked",
];

/// Layout version recorded in observation dumps; bump when the channel
/// convention changes.
pub const OBS_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("fov size {0} must be odd and >= 3")]
    BadFov(usize),
}

fn state_code(w: WorkState) -> f64 {
    match w {
        WorkState::Picking => 1.0,
        WorkState::Dropping => 2.0,
        WorkState::Idle => 3.0,
    }
}

/// 13 planes of `fov x fov` values centered on the owning agent.
#[derive(Debug, Clone)]
pub struct ObservationTensor {
    pub agent_id: usize,
    pub fov: usize,
    data: Vec<f64>,
}

impl ObservationTensor {
    fn zeros(agent_id: usize, fov: usize) -> Self {
        ObservationTensor { agent_id, fov, data: vec![0.0; N_CHANNELS * fov * fov] }
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.fov + y) * self.fov + x]
    }

    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        self.data[(ch * self.fov + y) * self.fov + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.fov * self.fov;
        &self.data[ch * n..(ch + 1) * n]
    }
}

/// Per-map caches shared by all observation builds: corridor membership and
/// endpoint cells.
pub struct ObsContext {
    pub corridors: CorridorIndex,
    /// cell index -> corridor id (usize::MAX = not a corridor cell)
    corridor_of: Vec<usize>,
    endpoint_cells: Vec<Cell>,
    width: usize,
}

impl ObsContext {
    pub fn new(map: &GridMap) -> Self {
        let corridors = crate::map::find_corridors(map);
        let mut corridor_of = vec![usize::MAX; map.width() * map.height()];
        for (id, c) in corridors.corridors.iter().enumerate() {
            for cell in &c.cells {
                corridor_of[cell.y * map.width() + cell.x] = id;
            }
        }
        let endpoint_cells = corridors.endpoint_cells();
        ObsContext { corridors, corridor_of, endpoint_cells, width: map.width() }
    }

    fn corridor_id(&self, c: Cell) -> Option<usize> {
        match self.corridor_of[c.y * self.width + c.x] {
            usize::MAX => None,
            id => Some(id),
        }
    }
}

/// Project `target` into the FOV: identity when inside, otherwise the
/// nearest boundary cell on the straight ray from the center to the target.
/// Returns FOV-local (y, x).
fn project_into_fov(center: Cell, target: Cell, m: usize) -> (usize, usize) {
    let half = (m / 2) as i64;
    let dx = target.x as i64 - center.x as i64;
    let dy = target.y as i64 - center.y as i64;
    if dx.abs() <= half && dy.abs() <= half {
        return ((dy + half) as usize, (dx + half) as usize);
    }
    let scale = half as f64 / dx.abs().max(dy.abs()) as f64;
    let px = (dx as f64 * scale).round() as i64;
    let py = (dy as f64 * scale).round() as i64;
    ((py.clamp(-half, half) + half) as usize, (px.clamp(-half, half) + half) as usize)
}

/// Build agent `agent`'s observation. `paths` holds, for every agent, its
/// single-agent shortest path (cells after the current position).
pub fn build_observation(
    state: &SimState,
    agent: usize,
    m: usize,
    paths: &[Vec<Cell>],
    ctx: &ObsContext,
) -> Result<ObservationTensor, ObsError> {
    if m < 3 || m % 2 == 0 {
        return Err(ObsError::BadFov(m));
    }
    let half = (m / 2) as i64;
    let me = &state.agents[agent];
    let center = me.pos;
    let mut obs = ObservationTensor::zeros(agent, m);

    let in_fov = |c: Cell| -> Option<(usize, usize)> {
        let dx = c.x as i64 - center.x as i64;
        let dy = c.y as i64 - center.y as i64;
        if dx.abs() <= half && dy.abs() <= half {
            Some(((dy + half) as usize, (dx + half) as usize))
        } else {
            None
        }
    };

    // ch0: obstacles, with everything outside the map marked blocked
    for fy in 0..m {
        for fx in 0..m {
            let wx = center.x as i64 + fx as i64 - half;
            let wy = center.y as i64 + fy as i64 - half;
            if !state.map.is_free_xy(wx, wy) {
                obs.set(0, fy, fx, 1.0);
            }
        }
    }

    // ch1: own goal, ray-projected when out of view
    let (gy, gx) = project_into_fov(center, me.goal, m);
    obs.set(1, gy, gx, 1.0);

    // ch2: own working state as a constant plane
    let code = state_code(me.work_state);
    for fy in 0..m {
        for fx in 0..m {
            obs.set(2, fy, fx, code);
        }
    }

    // ch3-5: other agents in view, their goals and states
    for other in &state.agents {
        if other.id == agent {
            continue;
        }
        if let Some((fy, fx)) = in_fov(other.pos) {
            obs.set(3, fy, fx, 1.0);
            obs.set(5, fy, fx, state_code(other.work_state));
            let (gy, gx) = project_into_fov(center, other.goal, m);
            obs.set(4, gy, gx, 1.0);
        }
    }

    // ch6: own predicted path over the next 3 steps
    for cell in paths[agent].iter().take(3) {
        if let Some((fy, fx)) = in_fov(*cell) {
            obs.set(6, fy, fx, 1.0);
        }
    }

    // ch7-9: others' predicted positions at t+1..t+3 (stalled paths hold the
    // last cell)
    for other in &state.agents {
        if other.id == agent {
            continue;
        }
        for k in 0..3usize {
            let cell = paths[other.id].get(k).copied().unwrap_or_else(|| {
                paths[other.id].last().copied().unwrap_or(other.pos)
            });
            if let Some((fy, fx)) = in_fov(cell) {
                obs.set(7 + k, fy, fx, 1.0);
            }
        }
    }

    // ch10/11: offsets from in-FOV corridor endpoints to the agent
    let clip = m as i64;
    for &ep in &ctx.endpoint_cells {
        if let Some((fy, fx)) = in_fov(ep) {
            let dx = (center.x as i64 - ep.x as i64).clamp(-clip, clip);
            let dy = (center.y as i64 - ep.y as i64).clamp(-clip, clip);
            obs.set(10, fy, fx, dx as f64 / m as f64);
            obs.set(11, fy, fx, dy as f64 / m as f64);
        }
    }

    // ch12: corridors occupied by oncoming traffic
    let mut blocked = vec![false; ctx.corridors.corridors.len()];
    for other in &state.agents {
        if other.id == agent {
            continue;
        }
        if let Some(cid) = ctx.corridor_id(other.pos) {
            let chain = &ctx.corridors.corridors[cid].cells;
            let next = paths[other.id].first().copied().unwrap_or(other.pos);
            let pos_idx = chain.iter().position(|&c| c == other.pos);
            let next_idx = chain.iter().position(|&c| c == next);
            if let (Some(pi), Some(ni)) = (pos_idx, next_idx) {
                // nearest chain cell to the observer marks "our" side
                let obs_side = chain
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, c)| c.manhattan(center))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if ni.abs_diff(obs_side) < pi.abs_diff(obs_side) {
                    blocked[cid] = true;
                }
            }
        }
    }
    for (cid, is_blocked) in blocked.iter().enumerate() {
        if !is_blocked {
            continue;
        }
        for cell in &ctx.corridors.corridors[cid].cells {
            if let Some((fy, fx)) = in_fov(*cell) {
                obs.set(12, fy, fx, 1.0);
            }
        }
    }

    Ok(obs)
}

/// Single-agent shortest paths used for the prediction channels; agents with
/// unreachable or trivial goals get empty paths.
pub fn predicted_paths(state: &SimState) -> Vec<Vec<Cell>> {
    state
        .agents
        .iter()
        .map(|a| crate::expert::astar_single(&state.map, a.pos, a.goal).unwrap_or_default())
        .collect()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    version: u32,
    dtype: &'a str,
    shape: [usize; 3],
    channel_names: [&'a str; N_CHANNELS],
}

/// Write the JSON sidecar describing the dump layout.
pub fn write_sidecar(dir: &std::path::Path, m: usize) -> std::io::Result<()> {
    let sidecar = Sidecar {
        version: OBS_LAYOUT_VERSION,
        dtype: "f64le",
        shape: [N_CHANNELS, m, m],
        channel_names: CHANNEL_NAMES,
    };
    std::fs::write(dir.join("sidecar.json"), serde_json::to_string_pretty(&sidecar).unwrap())
}

/// Write one observation as raw little-endian f64 planes.
pub fn write_observation(dir: &std::path::Path, tag: &str, obs: &ObservationTensor) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(obs.as_slice().len() * 8);
    for v in obs.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(format!("obs_{tag}.bin")), bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, Order};
    use crate::map::GridMap;

    fn single_state(map: &GridMap, pos: Cell, goal: Cell) -> SimState {
        let order = Order { release_time: 0, pickup: goal, drop: pos };
        let seed = (0..5000u64)
            .find(|&s| reset(map, 1, &[vec![order]], s).unwrap().agents[0].pos == pos)
            .expect("no seed places the agent at the requested cell");
        reset(map, 1, &[vec![order]], seed).unwrap()
    }

    #[test]
    fn bad_fov_rejected() {
        let map = GridMap::open(5, 5);
        let state = single_state(&map, Cell::new(2, 2), Cell::new(0, 0));
        let ctx = ObsContext::new(&map);
        let paths = predicted_paths(&state);
        assert!(matches!(build_observation(&state, 0, 4, &paths, &ctx), Err(ObsError::BadFov(4))));
        assert!(matches!(build_observation(&state, 0, 1, &paths, &ctx), Err(ObsError::BadFov(1))));
    }

    #[test]
    fn empty_center_sees_nothing() {
        let map = GridMap::open(20, 20);
        let state = single_state(&map, Cell::new(10, 10), Cell::new(10, 12));
        let ctx = ObsContext::new(&map);
        let paths = predicted_paths(&state);
        let obs = build_observation(&state, 0, 11, &paths, &ctx).unwrap();
        assert!(obs.plane(0).iter().all(|&v| v == 0.0));
        for ch in [3, 4, 5, 7, 8, 9] {
            assert!(obs.plane(ch).iter().all(|&v| v == 0.0), "channel {ch} not empty");
        }
    }

    #[test]
    fn corner_marks_out_of_map() {
        let map = GridMap::open(20, 20);
        let state = single_state(&map, Cell::new(0, 0), Cell::new(3, 0));
        let ctx = ObsContext::new(&map);
        let paths = predicted_paths(&state);
        let obs = build_observation(&state, 0, 11, &paths, &ctx).unwrap();
        for fy in 0..11 {
            for fx in 0..11 {
                let outside = fy < 5 || fx < 5;
                assert_eq!(obs.get(0, fy, fx) == 1.0, outside, "at ({fy},{fx})");
            }
        }
    }

    #[test]
    fn distant_goal_projected_to_boundary() {
        let map = GridMap::open(3, 40);
        let state = single_state(&map, Cell::new(2, 1), Cell::new(32, 1));
        let ctx = ObsContext::new(&map);
        let paths = predicted_paths(&state);
        let obs = build_observation(&state, 0, 11, &paths, &ctx).unwrap();
        // goal is 30 cells due right: one-hot at center row, rightmost column
        assert_eq!(obs.get(1, 5, 10), 1.0);
        assert_eq!(obs.plane(1).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn own_path_marked() {
        let map = GridMap::open(9, 9);
        let state = single_state(&map, Cell::new(4, 4), Cell::new(8, 4));
        let ctx = ObsContext::new(&map);
        let paths = predicted_paths(&state);
        let obs = build_observation(&state, 0, 11, &paths, &ctx).unwrap();
        let marked: f64 = obs.plane(6).iter().sum();
        assert_eq!(marked, 3.0);
        for cell in paths[0].iter().take(3) {
            let fy = (cell.y + 5 - 4) as usize;
            let fx = (cell.x + 5 - 4) as usize;
            assert_eq!(obs.get(6, fy, fx), 1.0);
        }
    }

    #[test]
    fn state_plane_constant() {
        let map = GridMap::open(5, 5);
        let state = single_state(&map, Cell::new(2, 2), Cell::new(4, 4));
        let ctx = ObsContext::new(&map);
        let paths = predicted_paths(&state);
        let obs = build_observation(&state, 0, 5, &paths, &ctx).unwrap();
        let code = obs.get(2, 0, 0);
        assert_eq!(code, 1.0); // picking
        assert!(obs.plane(2).iter().all(|&v| v == code));
    }
}
