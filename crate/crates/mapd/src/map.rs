//! Grid map loading, traversal graph, corridor detection and complexity metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A grid coordinate. `x` is the column, `y` the row; `(0, 0)` is the top-left cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Free,
    Obstacle,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map text is empty")]
    Empty,
    #[error("row {row} has width {got}, expected {expected}")]
    RaggedRows { row: usize, expected: usize, got: usize },
    #[error("unknown cell character {0:?}")]
    UnknownCell(char),
    #[error("header declares {declared_h}x{declared_w} but body is {body_h}x{body_w}")]
    HeaderMismatch { declared_h: usize, declared_w: usize, body_h: usize, body_w: usize },
    #[error("graph has fewer than 2 nodes")]
    DegenerateGraph,
}

/// An occupancy grid. Rows are stored top to bottom.
#[derive(Debug, Clone)]
pub struct GridMap {
    pub name: String,
    height: usize,
    width: usize,
    cells: Vec<Tile>,
}

impl GridMap {
    pub fn from_tiles(name: &str, height: usize, width: usize, cells: Vec<Tile>) -> Self {
        assert_eq!(cells.len(), height * width);
        GridMap { name: name.to_string(), height, width, cells }
    }

    /// All-free map, useful for tests and fixtures.
    pub fn open(height: usize, width: usize) -> Self {
        GridMap {
            name: format!("open_{height}x{width}"),
            height,
            width,
            cells: vec![Tile::Free; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tile(&self, c: Cell) -> Tile {
        self.cells[c.y * self.width + c.x]
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.tile(c) == Tile::Free
    }

    /// True when `(x, y)` is inside the grid and free.
    pub fn is_free_xy(&self, x: i64, y: i64) -> bool {
        self.in_bounds(x, y) && self.is_free(Cell::new(x as usize, y as usize))
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                if self.is_free(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// 4-connected free neighbors of a cell.
    pub fn neighbors4(&self, c: Cell) -> Vec<Cell> {
        let mut out = Vec::with_capacity(4);
        let (x, y) = (c.x as i64, c.y as i64);
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            if self.is_free_xy(x + dx, y + dy) {
                out.push(Cell::new((x + dx) as usize, (y + dy) as usize));
            }
        }
        out
    }

    pub fn obstacle_density(&self) -> f64 {
        let obstacles = self.cells.iter().filter(|t| **t == Tile::Obstacle).count();
        obstacles as f64 / (self.height * self.width) as f64
    }
}

/// Parse a map from raw grid rows, optionally preceded by a MovingAI-style
/// header (`type`, `height H`, `width W`, `map`).
/// Alphabet: `.` and `0` are free; `#`, `@`, `T` and `1` are obstacles.
pub fn load_map(text: &str, name: &str) -> Result<GridMap, MapError> {
    let mut lines: Vec<&str> = text.lines().map(|l| l.trim_end()).collect();
    while matches!(lines.last(), Some(l) if l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return Err(MapError::Empty);
    }

    let mut declared: Option<(usize, usize)> = None;
    if lines[0].starts_with("type") {
        let mut h = None;
        let mut w = None;
        let mut body_start = lines.len();
        for (i, line) in lines.iter().enumerate() {
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("height") {
                h = v.trim().parse::<usize>().ok();
            } else if let Some(v) = lower.strip_prefix("width") {
                w = v.trim().parse::<usize>().ok();
            } else if lower == "map" {
                body_start = i + 1;
                break;
            }
        }
        if let (Some(h), Some(w)) = (h, w) {
            declared = Some((h, w));
        }
        lines.drain(..body_start.min(lines.len()));
        if lines.is_empty() {
            return Err(MapError::Empty);
        }
    }

    let width = lines[0].len();
    let mut cells = Vec::with_capacity(lines.len() * width);
    for (row, line) in lines.iter().enumerate() {
        if line.len() != width {
            return Err(MapError::RaggedRows { row, expected: width, got: line.len() });
        }
        for ch in line.chars() {
            cells.push(match ch {
                '.' | '0' => Tile::Free,
                '#' | '@' | 'T' | '1' => Tile::Obstacle,
                other => return Err(MapError::UnknownCell(other)),
            });
        }
    }
    let height = lines.len();
    if let Some((dh, dw)) = declared {
        if dh != height || dw != width {
            return Err(MapError::HeaderMismatch {
                declared_h: dh,
                declared_w: dw,
                body_h: height,
                body_w: width,
            });
        }
    }
    Ok(GridMap::from_tiles(name, height, width, cells))
}

/// Node and edge counts of the 4-connected free-cell graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraversalGraph {
    pub node_count: usize,
    pub edge_count: usize,
}

pub fn build_graph(map: &GridMap) -> TraversalGraph {
    let mut nodes = 0;
    let mut edges = 0;
    for y in 0..map.height() {
        for x in 0..map.width() {
            let c = Cell::new(x, y);
            if !map.is_free(c) {
                continue;
            }
            nodes += 1;
            // count each undirected edge once: rightward and downward only
            if map.is_free_xy(x as i64 + 1, y as i64) {
                edges += 1;
            }
            if map.is_free_xy(x as i64, y as i64 + 1) {
                edges += 1;
            }
        }
    }
    TraversalGraph { node_count: nodes, edge_count: edges }
}

/// A maximal chain of free cells whose traversal-graph degree is exactly 2.
/// `endpoints` are the adjacent free cells of other degree that bound the
/// chain (empty for closed loops).
#[derive(Debug, Clone)]
pub struct Corridor {
    pub cells: Vec<Cell>,
    pub endpoints: Vec<Cell>,
}

impl Corridor {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorridorIndex {
    pub corridors: Vec<Corridor>,
    pub mean_length: f64,
}

impl CorridorIndex {
    /// Cells that bound corridors, deduplicated.
    pub fn endpoint_cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = self.corridors.iter().flat_map(|c| c.endpoints.iter().copied()).collect();
        out.sort();
        out.dedup();
        out
    }
}

pub fn find_corridors(map: &GridMap) -> CorridorIndex {
    let deg2 = |c: Cell| map.neighbors4(c).len() == 2;
    let mut visited = vec![false; map.height() * map.width()];
    let idx = |c: Cell| c.y * map.width() + c.x;

    let mut corridors = Vec::new();
    for start in map.free_cells() {
        if visited[idx(start)] || !deg2(start) {
            continue;
        }
        // walk to one end of the chain (or all the way around a loop)
        let mut head = start;
        let mut prev: Option<Cell> = None;
        loop {
            let next = map
                .neighbors4(head)
                .into_iter()
                .find(|n| deg2(*n) && Some(*n) != prev && *n != start);
            match next {
                Some(n) => {
                    prev = Some(head);
                    head = n;
                }
                None => break,
            }
        }
        // collect the chain in order starting from `head`
        let mut cells = vec![head];
        visited[idx(head)] = true;
        loop {
            let cur = *cells.last().unwrap();
            let next = map
                .neighbors4(cur)
                .into_iter()
                .find(|n| deg2(*n) && !visited[idx(*n)]);
            match next {
                Some(n) => {
                    visited[idx(n)] = true;
                    cells.push(n);
                }
                None => break,
            }
        }
        let mut endpoints = Vec::new();
        for terminal in [*cells.first().unwrap(), *cells.last().unwrap()] {
            for n in map.neighbors4(terminal) {
                if !deg2(n) && !endpoints.contains(&n) {
                    endpoints.push(n);
                }
            }
        }
        corridors.push(Corridor { cells, endpoints });
    }

    let mean_length = if corridors.is_empty() {
        0.0
    } else {
        corridors.iter().map(|c| c.len() as f64).sum::<f64>() / corridors.len() as f64
    };
    CorridorIndex { corridors, mean_length }
}

/// Map-complexity metrics. `v_e` grows as pathways narrow.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MapMetrics {
    pub rho_o: f64,
    pub rho_t: f64,
    pub rho_e: f64,
    pub v_e: f64,
    pub l_corr: f64,
    pub alpha_pfci: f64,
}

pub const DEFAULT_ALPHA_PFCI: f64 = 0.001;

pub fn compute_pfci(map: &GridMap, alpha_pfci: f64) -> Result<MapMetrics, MapError> {
    let graph = build_graph(map);
    if graph.node_count < 2 {
        return Err(MapError::DegenerateGraph);
    }
    let rho_o = map.obstacle_density();
    let rho_t = 1.0 - rho_o;
    let v = graph.node_count as f64;
    let rho_e = 2.0 * graph.edge_count as f64 / (v * (v - 1.0));
    let v_e = alpha_pfci / (rho_e * rho_t);
    let l_corr = find_corridors(map).mean_length;
    Ok(MapMetrics { rho_o, rho_t, rho_e, v_e, l_corr, alpha_pfci })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_map() {
        let m = load_map(".", "m").unwrap();
        assert_eq!((m.height(), m.width()), (1, 1));
        assert_eq!(m.free_cells().len(), 1);
    }

    #[test]
    fn obstacle_density_counts() {
        let m = load_map(".#.\n...\n.#.", "m").unwrap();
        assert_eq!((m.height(), m.width()), (3, 3));
        assert!((m.obstacle_density() - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matches!(load_map(".#.\n..", "m"), Err(MapError::RaggedRows { .. })));
    }

    #[test]
    fn unknown_cell_rejected() {
        assert!(matches!(load_map(".x.", "m"), Err(MapError::UnknownCell('x'))));
    }

    #[test]
    fn movingai_header() {
        let text = "type octile\nheight 2\nwidth 3\nmap\n...\n.@.\n";
        let m = load_map(text, "m").unwrap();
        assert_eq!((m.height(), m.width()), (2, 3));
        assert!(!m.is_free(Cell::new(1, 1)));
    }

    #[test]
    fn header_mismatch() {
        let text = "type octile\nheight 4\nwidth 3\nmap\n...\n...\n";
        assert!(matches!(load_map(text, "m"), Err(MapError::HeaderMismatch { .. })));
    }

    #[test]
    fn graph_counts() {
        let open = GridMap::open(3, 3);
        assert_eq!(build_graph(&open), TraversalGraph { node_count: 9, edge_count: 12 });
        let single = GridMap::open(1, 1);
        assert_eq!(build_graph(&single), TraversalGraph { node_count: 1, edge_count: 0 });
        let pair = GridMap::open(1, 2);
        assert_eq!(build_graph(&pair), TraversalGraph { node_count: 2, edge_count: 1 });
    }

    #[test]
    fn corridor_in_row() {
        let m = GridMap::open(1, 5);
        let idx = find_corridors(&m);
        assert_eq!(idx.corridors.len(), 1);
        assert_eq!(idx.corridors[0].len(), 3);
        assert_eq!(idx.mean_length, 3.0);
        // the chain is the 3 interior cells, bounded by the two end cells
        assert_eq!(idx.corridors[0].endpoints.len(), 2);
    }

    #[test]
    fn single_cell_has_no_corridor() {
        let idx = find_corridors(&GridMap::open(1, 1));
        assert!(idx.corridors.is_empty());
        assert_eq!(idx.mean_length, 0.0);
    }

    #[test]
    fn pfci_open_3x3() {
        let m = GridMap::open(3, 3);
        let metrics = compute_pfci(&m, 0.001).unwrap();
        assert!((metrics.rho_e - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(metrics.rho_t, 1.0);
        assert!((metrics.v_e - 0.003).abs() < 1e-15);
    }

    #[test]
    fn pfci_degenerate() {
        let m = load_map(".", "m").unwrap();
        assert!(matches!(compute_pfci(&m, 0.001), Err(MapError::DegenerateGraph)));
    }

    #[test]
    fn pfci_identity_holds() {
        let m = load_map(".#.\n...\n.#.", "m").unwrap();
        let metrics = compute_pfci(&m, 0.001).unwrap();
        assert!((metrics.v_e * metrics.rho_e * metrics.rho_t - 0.001).abs() < 1e-15);
    }
}
