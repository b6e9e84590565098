//! Pointmass navigation MDP: 2-D single-integrator dynamics with additive
//! Gaussian noise, a sparse goal reward, a rectangular obstacle with
//! freeze-on-violation semantics, raster observation rendering, and the
//! scripted policies used to build the offline dataset.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called after horizon elapsed (t = {0})")]
    HorizonElapsed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    StateVector,
    Raster,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub workspace: Rect,
    pub start: [f64; 2],
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub obstacle: Rect,
    pub noise_sigma: f64,
    /// Task horizon T.
    pub horizon: usize,
    /// Per-axis action bound in units/step.
    pub max_speed: f64,
    pub obs_mode: ObsMode,
    /// Raster side length G (G x G grayscale grid).
    pub raster_size: usize,
    /// Radius of the drawn agent disk in workspace units. A footprint wider
    /// than one raster cell makes nearby positions render to overlapping
    /// (and sub-cell-distinct) rasters instead of aliasing to one hot cell.
    pub agent_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            workspace: Rect {
                x0: 0.0,
                x1: 180.0,
                y0: 0.0,
                y1: 150.0,
            },
            start: [30.0, 75.0],
            goal_center: [150.0, 75.0],
            goal_radius: 3.0,
            obstacle: Rect {
                x0: 60.0,
                x1: 120.0,
                y0: 20.0,
                y1: 100.0,
            },
            noise_sigma: 0.125,
            horizon: 100,
            max_speed: 3.0,
            obs_mode: ObsMode::Raster,
            raster_size: 16,
            agent_radius: 21.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.noise_sigma < 0.0 {
            return Err("env.noise_sigma must be >= 0".into());
        }
        if self.horizon < 1 {
            return Err("env.horizon must be >= 1".into());
        }
        if self.obstacle.contains(self.start) {
            return Err("env.start must lie outside the obstacle".into());
        }
        if self.obstacle.contains(self.goal_center) {
            return Err("env.goal_center must lie outside the obstacle".into());
        }
        let g = self.goal_center;
        let r = self.goal_radius;
        let ws = self.workspace;
        if g[0] - r < ws.x0 || g[0] + r > ws.x1 || g[1] - r < ws.y0 || g[1] + r > ws.y1 {
            return Err("goal ball must lie inside the workspace".into());
        }
        if self.raster_size < 2 {
            return Err("env.raster_size must be >= 2".into());
        }
        if self.agent_radius < 0.0 {
            return Err("env.agent_radius must be >= 0".into());
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::StateVector => 2,
            ObsMode::Raster => self.raster_size * self.raster_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub t: usize,
    pub frozen: bool,
    pub violated: bool,
    pub succeeded: bool,
}

/// Observation emitted by the environment; a deterministic function of the
/// agent position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Observation {
    StateVector { values: [f64; 2] },
    Raster { size: usize, values: Vec<f64> },
}

impl Observation {
    pub fn as_flat(&self) -> Vec<f64> {
        match self {
            Observation::StateVector { values } => values.to_vec(),
            Observation::Raster { values, .. } => values.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Observation::StateVector { .. } => 2,
            Observation::Raster { values, .. } => values.len(),
        }
    }
}

/// One environment step, the unit stored in datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f64; 2],
    pub next_obs: Observation,
    pub reward: f64,
    pub constraint_violation: bool,
    pub in_goal: bool,
    pub trajectory_id: u64,
    pub step_index: usize,
    pub in_success_trajectory: bool,
}

fn observe(position: [f64; 2], config: &EnvConfig) -> Observation {
    match config.obs_mode {
        ObsMode::StateVector => Observation::StateVector { values: position },
        ObsMode::Raster => render_raster(position, config),
    }
}

pub fn reset(config: &EnvConfig) -> (EnvState, Observation) {
    let state = EnvState {
        position: config.start,
        t: 0,
        frozen: false,
        violated: false,
        succeeded: false,
    };
    let obs = observe(state.position, config);
    (state, obs)
}

fn in_goal_ball(p: [f64; 2], config: &EnvConfig) -> bool {
    let dx = p[0] - config.goal_center[0];
    let dy = p[1] - config.goal_center[1];
    (dx * dx + dy * dy).sqrt() <= config.goal_radius
}

fn sample_noise(sigma: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    if sigma == 0.0 {
        return [0.0, 0.0];
    }
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, sigma).expect("sigma >= 0");
    [n.sample(rng), n.sample(rng)]
}

/// Advance one step. Actions are clipped per axis to `[-max_speed, max_speed]`
/// and positions clamp to the workspace. Entering the obstacle freezes the
/// state for the remainder of the episode.
pub fn step(
    state: &EnvState,
    action: [f64; 2],
    config: &EnvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EnvState, Observation, f64, bool), EnvError> {
    if state.t >= config.horizon {
        return Err(EnvError::HorizonElapsed(state.t));
    }
    let mut next = *state;
    next.t += 1;
    if state.frozen {
        let obs = observe(next.position, config);
        return Ok((next, obs, -1.0, true));
    }
    let a = [
        action[0].clamp(-config.max_speed, config.max_speed),
        action[1].clamp(-config.max_speed, config.max_speed),
    ];
    let eps = sample_noise(config.noise_sigma, rng);
    let ws = config.workspace;
    let p = [
        (state.position[0] + a[0] + eps[0]).clamp(ws.x0, ws.x1),
        (state.position[1] + a[1] + eps[1]).clamp(ws.y0, ws.y1),
    ];
    next.position = p;
    // Success latches; a trajectory is never both succeeded and violated.
    if !state.succeeded && config.obstacle.contains(p) {
        next.violated = true;
        next.frozen = true;
    }
    let reward;
    if next.frozen {
        reward = -1.0;
    } else if in_goal_ball(p, config) {
        reward = 0.0;
        next.succeeded = true;
    } else {
        reward = -1.0;
    }
    let obs = observe(p, config);
    Ok((next, obs, reward, next.violated))
}

/// G x G grayscale grid: background 0, obstacle 0.33, goal 0.66, agent 1.0
/// drawn last. Purely a function of the position.
pub fn render_raster(position: [f64; 2], config: &EnvConfig) -> Observation {
    let g = config.raster_size;
    let ws = config.workspace;
    let cw = (ws.x1 - ws.x0) / g as f64;
    let ch = (ws.y1 - ws.y0) / g as f64;
    let cell_center = |ix: usize, iy: usize| -> [f64; 2] {
        [
            ws.x0 + (ix as f64 + 0.5) * cw,
            ws.y0 + (iy as f64 + 0.5) * ch,
        ]
    };
    let mut values = vec![0.0f64; g * g];
    for iy in 0..g {
        for ix in 0..g {
            let c = cell_center(ix, iy);
            if config.obstacle.contains(c) {
                values[iy * g + ix] = 0.33;
            }
            let dx = c[0] - config.goal_center[0];
            let dy = c[1] - config.goal_center[1];
            // A goal cell is any cell whose center lies within one cell
            // diagonal of the goal center, so the goal is visible even when
            // its radius is below the grid resolution.
            let goal_reach = config.goal_radius.max(0.5 * (cw * cw + ch * ch).sqrt());
            if (dx * dx + dy * dy).sqrt() <= goal_reach {
                values[iy * g + ix] = 0.66;
            }
        }
    }
    // Agent disk drawn last, overwriting anything beneath it: every cell
    // whose center lies within agent_radius of the position, plus the cell
    // containing the position itself so the agent is visible at any radius.
    for iy in 0..g {
        for ix in 0..g {
            let c = cell_center(ix, iy);
            let dx = c[0] - position[0];
            let dy = c[1] - position[1];
            if (dx * dx + dy * dy).sqrt() <= config.agent_radius {
                values[iy * g + ix] = 1.0;
            }
        }
    }
    let ix = (((position[0] - ws.x0) / cw) as usize).min(g - 1);
    let iy = (((position[1] - ws.y0) / ch) as usize).min(g - 1);
    values[iy * g + ix] = 1.0;
    Observation::Raster { size: g, values }
}

/// Scripted demonstrator: north for 20 steps, east for 40 steps, then
/// straight toward the goal center.
pub fn demo_policy(state: &EnvState, config: &EnvConfig) -> [f64; 2] {
    let s = config.max_speed;
    if state.t < 20 {
        [0.0, s]
    } else if state.t < 60 {
        [s, 0.0]
    } else {
        let dx = config.goal_center[0] - state.position[0];
        let dy = config.goal_center[1] - state.position[1];
        let dist = (dx * dx + dy * dy).sqrt();
        if dist == 0.0 {
            [0.0, 0.0]
        } else {
            let speed = s.min(dist);
            [dx / dist * speed, dy / dist * speed]
        }
    }
}

/// Constraint demonstrator: a fixed random unit direction for the first 15
/// steps, then straight at the obstacle center.
#[derive(Debug, Clone)]
pub struct ConstraintDemoPolicy {
    pub start: [f64; 2],
    pub random_direction: [f64; 2],
}

impl ConstraintDemoPolicy {
    /// Episode starts at a uniformly sampled workspace position outside the
    /// obstacle.
    pub fn sample(config: &EnvConfig, rng: &mut ChaCha8Rng) -> Self {
        let ws = config.workspace;
        let start = loop {
            let p = [
                rng.gen_range(ws.x0..=ws.x1),
                rng.gen_range(ws.y0..=ws.y1),
            ];
            if !config.obstacle.contains(p) {
                break p;
            }
        };
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        ConstraintDemoPolicy {
            start,
            random_direction: [theta.cos(), theta.sin()],
        }
    }

    pub fn action(&self, state: &EnvState, config: &EnvConfig) -> [f64; 2] {
        let s = config.max_speed;
        if state.t < 15 {
            [self.random_direction[0] * s, self.random_direction[1] * s]
        } else {
            let ob = config.obstacle;
            let center = [(ob.x0 + ob.x1) / 2.0, (ob.y0 + ob.y1) / 2.0];
            let dx = center[0] - state.position[0];
            let dy = center[1] - state.position[1];
            let dist = (dx * dx + dy * dy).sqrt();
            if dist == 0.0 {
                [0.0, 0.0]
            } else {
                [dx / dist * s, dy / dist * s]
            }
        }
    }
}

/// Uniform random policy over the action box.
pub fn random_policy(config: &EnvConfig, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let s = config.max_speed;
    [rng.gen_range(-s..=s), rng.gen_range(-s..=s)]
}

/// Roll out one episode of exactly `horizon` transitions (freeze padding
/// included) and relabel `in_success_trajectory` afterwards.
///
/// The policy sees the current state and observation and returns an action.
pub fn collect_trajectory<P>(
    mut policy: P,
    start_position: Option<[f64; 2]>,
    config: &EnvConfig,
    trajectory_id: u64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Transition>, bool)
where
    P: FnMut(&EnvState, &Observation, &mut ChaCha8Rng) -> [f64; 2],
{
    let (mut state, mut obs) = reset(config);
    if let Some(p) = start_position {
        state.position = p;
        obs = observe(p, config);
    }
    let mut transitions = Vec::with_capacity(config.horizon);
    for step_index in 0..config.horizon {
        let action = if state.frozen {
            [0.0, 0.0]
        } else {
            policy(&state, &obs, rng)
        };
        let (next_state, next_obs, reward, _violation) =
            step(&state, action, config, rng).expect("within horizon");
        let in_goal = reward == 0.0;
        transitions.push(Transition {
            obs,
            action,
            next_obs: next_obs.clone(),
            reward,
            constraint_violation: next_state.violated,
            in_goal,
            trajectory_id,
            step_index,
            in_success_trajectory: false,
        });
        state = next_state;
        obs = next_obs;
    }
    let success = state.succeeded && !state.violated;
    for tr in &mut transitions {
        tr.in_success_trajectory = success;
    }
    (transitions, success)
}
