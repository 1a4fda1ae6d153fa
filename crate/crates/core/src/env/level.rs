//! Procedural level layouts.

use std::collections::VecDeque;

use rand::Rng as _;

use super::{Action, EnvConfig};
use crate::rng;

const LEVEL_TAG: u64 = 0x1e7e1;

/// Colors that distractor tiles draw from. None of them is close to a reserved
/// entity color.
pub const DISTRACTOR_PALETTE: [[f64; 3]; 6] = [
    [0.1, 0.3, 0.9],
    [0.0, 0.7, 0.7],
    [0.7, 0.2, 0.8],
    [0.2, 0.8, 0.3],
    [0.95, 0.55, 0.1],
    [0.5, 0.5, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Floor,
    Wall,
    Distractor(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub seed: u64,
    pub size: usize,
    pub cells: Vec<Cell>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
}

impl LevelSpec {
    /// Deterministic layout for `seed`. Border cells are walls; start and goal
    /// are distinct floor cells joined by a path (retries until one exists).
    pub fn generate(config: &EnvConfig, seed: u64) -> Self {
        let g = config.grid_size;
        let mut r = rng::stream(seed, LEVEL_TAG);
        loop {
            let mut cells = vec![Cell::Floor; g * g];
            for y in 0..g {
                for x in 0..g {
                    if y == 0 || x == 0 || y == g - 1 || x == g - 1 || r.random::<f64>() < config.wall_density {
                        cells[y * g + x] = Cell::Wall;
                    }
                }
            }
            let free: Vec<(usize, usize)> = (0..g * g)
                .filter(|i| cells[*i] == Cell::Floor)
                .map(|i| (i / g, i % g))
                .collect();
            if free.len() < 2 {
                continue;
            }
            let start = free[r.random_range(0..free.len())];
            let goal = free[r.random_range(0..free.len())];
            if start == goal {
                continue;
            }
            for &(y, x) in &free {
                if (y, x) != start && (y, x) != goal && r.random::<f64>() < config.distractor_density {
                    cells[y * g + x] = Cell::Distractor(r.random_range(0..DISTRACTOR_PALETTE.len()) as u8);
                }
            }
            let level = Self { seed, size: g, cells, start, goal };
            if level.shortest_path().is_some() {
                return level;
            }
        }
    }

    pub fn cell(&self, (y, x): (usize, usize)) -> Cell {
        self.cells[y * self.size + x]
    }

    pub fn is_wall(&self, pos: (usize, usize)) -> bool {
        self.cell(pos) == Cell::Wall
    }

    /// Cell reached by `action` from `pos`; walls block.
    pub fn moved(&self, pos: (usize, usize), action: Action) -> (usize, usize) {
        let (y, x) = pos;
        let next = match action {
            Action::Up => (y.wrapping_sub(1), x),
            Action::Down => (y + 1, x),
            Action::Left => (y, x.wrapping_sub(1)),
            Action::Right => (y, x + 1),
        };
        if next.0 >= self.size || next.1 >= self.size || self.is_wall(next) {
            pos
        } else {
            next
        }
    }

    /// Breadth-first shortest action sequence from start to goal.
    pub fn shortest_path(&self) -> Option<Vec<Action>> {
        self.path_from(self.start)
    }

    pub fn path_from(&self, from: (usize, usize)) -> Option<Vec<Action>> {
        let n = self.size * self.size;
        let idx = |(y, x): (usize, usize)| y * self.size + x;
        let mut prev: Vec<Option<(usize, Action)>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([from]);
        seen[idx(from)] = true;
        while let Some(pos) = queue.pop_front() {
            if pos == self.goal {
                let mut path = Vec::new();
                let mut cur = idx(pos);
                while let Some((p, a)) = prev[cur] {
                    path.push(a);
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            for a in Action::ALL {
                let next = self.moved(pos, a);
                if !seen[idx(next)] {
                    seen[idx(next)] = true;
                    prev[idx(next)] = Some((idx(pos), a));
                    queue.push_back(next);
                }
            }
        }
        None
    }
}
