//! Procedurally generated pixel navigation task.
//!
//! The agent (red) walks a walled grid toward a goal (yellow). Levels are
//! seeded layouts; backgrounds are seeded textures. Three modes split the
//! two factors: `easybg` trains on levels `0..L` with one background,
//! `test-bg` keeps the levels but swaps in held-out backgrounds, and
//! `test-lv` keeps the background but uses the unseen levels `L..2L`.

pub mod background;
pub mod level;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use background::{BackgroundSpec, Texture};
pub use level::{Cell, LevelSpec, DISTRACTOR_PALETTE};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const AGENT_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const GOAL_COLOR: [f64; 3] = [1.0, 1.0, 0.0];
pub const WALL_COLOR: [f64; 3] = [0.2, 0.2, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::InvalidAction {
            action: i,
            num_actions: Self::COUNT,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub image_size: usize,
    /// Number of training levels `L`.
    pub levels: u64,
    pub train_background: u64,
    /// Size of the held-out background set used by `test-bg`.
    pub test_backgrounds: u64,
    pub reward_goal: f64,
    pub step_penalty: f64,
    pub max_steps: usize,
    pub distractor_density: f64,
    pub wall_density: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            image_size: 64,
            levels: 50,
            train_background: 0,
            test_backgrounds: 20,
            reward_goal: 10.0,
            step_penalty: 0.0,
            max_steps: 256,
            distractor_density: 0.1,
            wall_density: 0.2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("env: {m}")));
        if self.grid_size < 4 {
            return bad(format!("grid_size {} < 4", self.grid_size));
        }
        if self.image_size == 0 || self.image_size % self.grid_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of grid_size {}",
                self.image_size, self.grid_size
            ));
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_density) {
            return bad(format!("distractor_density {} outside [0, 1]", self.distractor_density));
        }
        if !(0.0..0.9).contains(&self.wall_density) {
            return bad(format!("wall_density {} outside [0, 0.9)", self.wall_density));
        }
        if !self.reward_goal.is_finite() || !self.step_penalty.is_finite() {
            return bad("rewards must be finite".into());
        }
        Ok(())
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, 3]
    }

    pub fn obs_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    /// Held-out background ids, disjoint from the training background.
    pub fn test_background_ids(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.test_backgrounds).map(move |i| self.train_background + 1 + i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvMode {
    EasyBg,
    TestBg,
    TestLv,
}

impl EnvMode {
    pub const ALL: [EnvMode; 3] = [EnvMode::EasyBg, EnvMode::TestBg, EnvMode::TestLv];

    pub fn name(self) -> &'static str {
        match self {
            EnvMode::EasyBg => "easybg",
            EnvMode::TestBg => "test-bg",
            EnvMode::TestLv => "test-lv",
        }
    }
}

impl fmt::Display for EnvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easybg" | "train" => Ok(EnvMode::EasyBg),
            "test-bg" | "test_bg" => Ok(EnvMode::TestBg),
            "test-lv" | "test_lv" => Ok(EnvMode::TestLv),
            _ => Err(Error::Config(format!("unknown env mode `{s}`"))),
        }
    }
}

impl TryFrom<String> for EnvMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnvMode> for String {
    fn from(m: EnvMode) -> String {
        m.name().to_string()
    }
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub level_id: u64,
    pub level: Arc<LevelSpec>,
    pub background: Arc<BackgroundSpec>,
    pub agent: (usize, usize),
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Tensor,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    config: Arc<EnvConfig>,
    mode: EnvMode,
    rng: Rng,
    state: Option<EnvState>,
    bg_cache: Option<(u64, Arc<Vec<f64>>)>,
    total_steps: u64,
}

pub fn make_env(config: Arc<EnvConfig>, mode: EnvMode, instance_seed: u64) -> Result<Env> {
    config.validate()?;
    if mode == EnvMode::TestBg && config.test_backgrounds == 0 {
        return Err(Error::Config("test-bg mode needs at least one held-out background".into()));
    }
    Ok(Env {
        config,
        mode,
        rng: rng::stream(instance_seed, rng::tags::ENV),
        state: None,
        bg_cache: None,
        total_steps: 0,
    })
}

impl Env {
    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn mode(&self) -> EnvMode {
        self.mode
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Environment steps taken over the lifetime of this instance.
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Samples the next (level, background) pair according to the mode.
    pub fn sample_ids(&mut self) -> (u64, u64) {
        let l = self.config.levels;
        let level = match self.mode {
            EnvMode::EasyBg | EnvMode::TestBg => self.rng.random_range(0..l),
            EnvMode::TestLv => l + self.rng.random_range(0..l),
        };
        let bg = match self.mode {
            EnvMode::EasyBg | EnvMode::TestLv => self.config.train_background,
            EnvMode::TestBg => self.config.train_background + 1 + self.rng.random_range(0..self.config.test_backgrounds),
        };
        (level, bg)
    }

    pub fn reset(&mut self) -> Tensor {
        let (level_id, bg) = self.sample_ids();
        self.reset_to(level_id, bg)
    }

    /// Starts an episode on a specific level and background.
    pub fn reset_to(&mut self, level_id: u64, background: u64) -> Tensor {
        let level = Arc::new(LevelSpec::generate(&self.config, level_id));
        let bg = Arc::new(BackgroundSpec::new(background));
        self.state = Some(EnvState {
            level_id,
            agent: level.start,
            level,
            background: bg,
            steps: 0,
        });
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let action = Action::from_index(action)?;
        let cfg = Arc::clone(&self.config);
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Config("step called before reset".into()))?;
        state.agent = state.level.moved(state.agent, action);
        state.steps += 1;
        self.total_steps += 1;
        let reached = state.agent == state.level.goal;
        let reward = if reached { cfg.reward_goal } else { cfg.step_penalty };
        let done = reached || state.steps >= cfg.max_steps;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done,
        })
    }

    fn observe(&mut self) -> Tensor {
        let state = self.state.as_ref().expect("observe after reset");
        let id = state.background.id;
        let bg = match &self.bg_cache {
            Some((cached, img)) if *cached == id => Arc::clone(img),
            _ => {
                let s = self.config.image_size;
                let img = Arc::new(state.background.image(s, s));
                self.bg_cache = Some((id, Arc::clone(&img)));
                img
            }
        };
        render_over(&self.config, state, &bg)
    }
}

/// Entity drawn in `cell`, if any, and whether it fills the whole cell.
/// Pixel footprint of an entity within its cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Full,
    Block,
    Ring,
    Cross,
}

fn entity_at(level: &LevelSpec, agent: (usize, usize), cell: (usize, usize)) -> Option<([f64; 3], Shape)> {
    if cell == agent {
        return Some((AGENT_COLOR, Shape::Block));
    }
    if cell == level.goal {
        return Some((GOAL_COLOR, Shape::Ring));
    }
    match level.cell(cell) {
        Cell::Wall => Some((WALL_COLOR, Shape::Full)),
        Cell::Distractor(k) => Some((DISTRACTOR_PALETTE[k as usize], Shape::Cross)),
        Cell::Floor => None,
    }
}

/// Whether offset `(oy, ox)` of a `px`-wide cell belongs to `shape`. Cells
/// narrower than 4 px are filled whatever the shape.
fn shape_covers(shape: Shape, px: usize, oy: usize, ox: usize) -> bool {
    let t = px / 4;
    let border = oy < t || ox < t || oy >= px - t || ox >= px - t;
    match shape {
        _ if px < 4 => true,
        Shape::Full => true,
        Shape::Block => !border,
        Shape::Ring => border,
        Shape::Cross => oy == ox || oy + ox == px - 1,
    }
}

fn covers(config: &EnvConfig, state: &EnvState, y: usize, x: usize) -> Option<[f64; 3]> {
    let px = config.image_size / config.grid_size;
    let (color, shape) = entity_at(&state.level, state.agent, (y / px, x / px))?;
    shape_covers(shape, px, y % px, x % px).then_some(color)
}

fn render_over(config: &EnvConfig, state: &EnvState, bg: &[f64]) -> Tensor {
    let s = config.image_size;
    let mut data = bg.to_vec();
    for y in 0..s {
        for x in 0..s {
            if let Some(color) = covers(config, state, y, x) {
                data[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    Tensor::from_parts(vec![s, s, 3], data).expect("render shape")
}

/// Draws entities in reserved colors over the background texture.
pub fn render(config: &EnvConfig, state: &EnvState, background: &BackgroundSpec) -> Tensor {
    let s = config.image_size;
    render_over(config, state, &background.image(s, s))
}

/// Whether pixel `(y, x)` is drawn by an entity (wall, agent, goal, distractor)
/// rather than the background. Walls fill their cell. Once cells are 4 px or
/// wider the agent is a central block, the goal a ring along the cell border
/// and distractors a diagonal cross.
pub fn is_entity_pixel(config: &EnvConfig, state: &EnvState, y: usize, x: usize) -> bool {
    covers(config, state, y, x).is_some()
}

/// Writes an `[H, W, 3]` image in `[0, 1]` as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("ppm expects [H, W, 3], got {s:?}")));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
