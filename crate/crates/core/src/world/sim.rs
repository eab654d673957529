use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Episode, WorldConfig, WorldError, AGENT_HEIGHT, DYNAMIC, FREE, STATIC, UNKNOWN};
use crate::grad::RngState;

const PAD: usize = 4;
const LANE_WIDTH: i64 = 3;
const PLACEMENT_TRIES: usize = 500;

/// A vehicle with a 2x2 footprint whose top-left cell is `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Agent {
    pub row: i64,
    pub col: i64,
    /// Cells per step along (rows, cols).
    pub vel: (i64, i64),
}

impl Agent {
    pub fn cells(&self) -> [(i64, i64); 4] {
        let (r, c) = (self.row, self.col);
        [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
    }

    fn overlaps(&self, row: i64, col: i64) -> bool {
        (row - self.row).abs() <= 1 && (col - self.col).abs() <= 1
    }
}

/// Full world state: static heights, agents and the ego vehicle.
#[derive(Clone, Debug)]
pub struct World {
    cfg: WorldConfig,
    rows: usize,
    cols: usize,
    heights: Vec<u8>,
    lanes: Vec<i64>,
    pub agents: Vec<Agent>,
    /// Top-left cell of the ego footprint.
    pub ego: (i64, i64),
    ego_speed: i64,
    target_lane: usize,
    agent_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl World {
    /// Open world without buildings, road edges or agents.
    pub fn blank(cfg: &WorldConfig, rows: usize, cols: usize, seed: u64) -> Self {
        let root = RngState::new(seed);
        Self {
            cfg: cfg.clone(),
            rows,
            cols,
            heights: vec![0; rows * cols],
            lanes: vec![(cols / 2) as i64 - 1],
            agents: Vec::new(),
            ego: (0, (cols / 2) as i64 - 1),
            ego_speed: cfg.ego_speed.1 as i64,
            target_lane: 0,
            agent_rng: root.fork(2).generator(),
            noise_rng: root.fork(3).generator(),
        }
    }

    pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<Self, WorldError> {
        cfg.validate()?;
        let (h, w) = (cfg.height, cfg.width);
        let cols = w + 2 * PAD;
        let rows = h + cfg.steps() * cfg.ego_speed.1 + 4;
        let mut world = Self::blank(cfg, rows, cols, seed);
        let mut layout = RngState::new(seed).fork(1).generator();

        let road_w = 9 + layout.random_range(0..4usize) as i64;
        let road_l = cols as i64 / 2 - road_w / 2 + layout.random_range(-2..=2i64);
        let road_r = road_l + road_w;
        world.lanes = (0..(road_w - 1) / LANE_WIDTH).map(|k| road_l + 1 + LANE_WIDTH * k).collect();

        let zmax = cfg.z_slabs as u8;
        for side in 0..2 {
            let mut r = 0;
            while r < rows {
                let len = layout.random_range(3..=8usize);
                let height = if layout.random::<f64>() < 0.2 { 0 } else { layout.random_range(1..=zmax) };
                let setback = 1 + layout.random_range(0..2i64);
                let span = if side == 0 { 0..(road_l - setback).max(0) } else { (road_r + setback).min(cols as i64)..cols as i64 };
                for rr in r..(r + len).min(rows) {
                    for c in span.clone() {
                        world.heights[rr * cols + c as usize] = height;
                    }
                }
                r += len;
            }
        }

        world.target_lane = layout.random_range(0..world.lanes.len());
        world.ego = ((h / 2 + 1) as i64, world.lanes[world.target_lane]);
        world.ego_speed = layout.random_range(cfg.ego_speed.0..=cfg.ego_speed.1) as i64;

        let n_obstacles = 1 + layout.random_range(0..3usize);
        for _ in 0..n_obstacles {
            let lane = world.lanes[layout.random_range(0..world.lanes.len())];
            let r = layout.random_range(world.ego.0 + 6..rows as i64 - 2);
            let c = lane + layout.random_range(0..2i64);
            let height = layout.random_range(1..=2u8).min(zmax);
            let wide = layout.random::<bool>();
            for cc in c..=(if wide { (c + 1).min(lane + 1) } else { c }) {
                world.heights[r as usize * cols + cc as usize] = height;
            }
        }

        let mut agents_rng = RngState::new(seed).fork(4).generator();
        for _ in 0..cfg.n_agents {
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let lane = world.lanes[agents_rng.random_range(0..world.lanes.len())];
                let a = Agent {
                    row: agents_rng.random_range(0..rows as i64 - 1),
                    col: lane,
                    vel: (agents_rng.random_range(0..=2i64), 0),
                };
                let near_ego = (a.row - world.ego.0).abs() <= 2 && (a.col - world.ego.1).abs() <= 1;
                if world.free_for(&a, None) && !near_ego {
                    placed = Some(a);
                    break;
                }
            }
            world.agents.push(placed.ok_or(WorldError::Placement(cfg.n_agents))?);
        }
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn static_height(&self, row: i64, col: i64) -> u8 {
        if row < 0 || col < 0 || row >= self.rows as i64 || col >= self.cols as i64 {
            return self.cfg.z_slabs as u8;
        }
        self.heights[row as usize * self.cols + col as usize]
    }

    fn hits_ego(&self, a: &Agent) -> bool {
        a.cells().iter().any(|&(r, c)| (r - self.ego.0 == 0 || r - self.ego.0 == 1) && (c - self.ego.1 == 0 || c - self.ego.1 == 1))
    }

    /// Footprint in bounds, clear of static cells and of every other agent.
    fn free_for(&self, a: &Agent, skip: Option<usize>) -> bool {
        a.cells().iter().all(|&(r, c)| {
            r >= 0 && c >= 0 && r < self.rows as i64 && c < self.cols as i64 && self.static_height(r, c) == 0
        }) && self.agents.iter().enumerate().all(|(i, o)| Some(i) == skip || !o.overlaps(a.row, a.col))
    }

    fn agent_at(&self, row: i64, col: i64) -> bool {
        self.agents.iter().any(|a| (0..2).contains(&(row - a.row)) && (0..2).contains(&(col - a.col)))
    }

    fn blocked(&self, row: i64, col: i64) -> bool {
        self.static_height(row, col) > 0 || self.agent_at(row, col)
    }

    /// Whether the 2-wide column band starting at `col` is clear for rows
    /// `from..=to`.
    fn band_clear(&self, col: i64, from: i64, to: i64) -> bool {
        (from..=to).all(|r| !self.blocked(r, col) && !self.blocked(r, col + 1))
    }

    /// Scripted lane keeper: hold the target lane at the cruise speed, switch
    /// to a neighbouring lane around obstructions, slow down otherwise.
    pub fn policy_action(&mut self) -> [f32; 2] {
        let (r, c) = self.ego;
        let v = self.ego_speed;
        let look = |w: &World, col: i64, speed: i64| w.band_clear(col, r + 1, r + speed.max(1) + 2);
        if self.lanes[self.target_lane] == c {
            if look(self, c, v) {
                return [v as f32, 0.0];
            }
            let n = self.lanes.len();
            let options = [self.target_lane.checked_sub(1), (self.target_lane + 1 < n).then_some(self.target_lane + 1)];
            for lane in options.into_iter().flatten() {
                let dir = (self.lanes[lane] - c).signum();
                if look(self, c + dir, v) && self.band_clear(c + dir, r, r + 1) {
                    self.target_lane = lane;
                    return [v as f32, dir as f32];
                }
            }
        } else {
            let dir = (self.lanes[self.target_lane] - c).signum();
            for speed in [v, 1] {
                if look(self, c + dir, speed) && self.band_clear(c + dir, r, r + 1) {
                    return [speed as f32, dir as f32];
                }
            }
        }
        if look(self, c, 1) {
            [1.0, 0.0]
        } else {
            [0.0, 0.0]
        }
    }

    /// Moves the ego by `action`, then every agent in index order.
    pub fn advance(&mut self, action: [f32; 2]) {
        let dr = action[0].round() as i64;
        let dc = action[1].round() as i64;
        self.ego = (self.ego.0 + dr, (self.ego.1 + dc).clamp(0, self.cols as i64 - 2));
        for i in 0..self.agents.len() {
            let drift = self.agent_rng.random::<f64>() < self.cfg.turn_prob;
            let side = if self.agent_rng.random::<bool>() { 1 } else { -1 };
            let a = self.agents[i];
            let lateral = if drift { side } else { 0 };
            let steps = a.vel.0.abs().max(1);
            let mut ok = true;
            for k in 1..=steps {
                let probe = Agent {
                    row: a.row + a.vel.0.signum() * k.min(a.vel.0.abs()),
                    col: a.col + a.vel.1 + lateral,
                    ..a
                };
                if !self.free_for(&probe, Some(i)) || self.hits_ego(&probe) {
                    ok = false;
                    break;
                }
            }
            if ok {
                self.agents[i] = Agent { row: a.row + a.vel.0, col: a.col + a.vel.1 + lateral, ..a };
            }
        }
    }

    fn class_at(&self, row: i64, col: i64, z: usize) -> u8 {
        if self.static_height(row, col) as usize > z {
            STATIC
        } else if z < AGENT_HEIGHT && self.agent_at(row, col) {
            DYNAMIC
        } else {
            FREE
        }
    }

    fn origin(&self) -> (i64, i64) {
        (self.ego.0 + 1 - self.cfg.height as i64 / 2, self.ego.1 + 1 - self.cfg.width as i64 / 2)
    }

    /// Exact `Z x H x W` labels of the ego-centric crop.
    pub fn crop_labels(&self) -> Vec<u8> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let (r0, c0) = self.origin();
        let mut out = Vec::with_capacity(self.cfg.voxels());
        for z in 0..self.cfg.z_slabs {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    out.push(self.class_at(r0 + i, c0 + j, z));
                }
            }
        }
        out
    }

    /// `Z x rows x cols` labels of the whole world.
    pub fn global_labels(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.cfg.z_slabs * self.rows * self.cols);
        for z in 0..self.cfg.z_slabs {
            for r in 0..self.rows as i64 {
                for c in 0..self.cols as i64 {
                    out.push(self.class_at(r, c, z));
                }
            }
        }
        out
    }

    /// Crop visibility: within the radius and not hidden behind a static cell.
    pub fn visibility(&self) -> Vec<bool> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let radius = self.cfg.occlusion_radius;
        if radius == 0.0 {
            return vec![true; h * w];
        }
        let (r0, c0) = self.origin();
        let (ey, ex) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut vis = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                let (ty, tx) = (i as f64 + 0.5, j as f64 + 0.5);
                let dist = ((ty - ey).powi(2) + (tx - ex).powi(2)).sqrt();
                if dist > radius {
                    continue;
                }
                let n = (dist * 2.0).ceil() as usize;
                let clear = (1..n).all(|k| {
                    let f = k as f64 / n as f64;
                    let (ci, cj) = ((ey + f * (ty - ey)).floor() as i64, (ex + f * (tx - ex)).floor() as i64);
                    (ci, cj) == (i as i64, j as i64) || self.static_height(r0 + ci, c0 + cj) == 0
                });
                vis[i * w + j] = clear;
            }
        }
        vis
    }

    /// Occluded, noisy observation of the given crop labels.
    pub fn observe(&mut self, labels: &[u8]) -> Vec<u8> {
        let plane = self.cfg.height * self.cfg.width;
        let vis = self.visibility();
        let noise = self.cfg.noise;
        labels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let u = self.noise_rng.random::<f64>();
                if !vis[k % plane] {
                    UNKNOWN
                } else if u < noise {
                    (c + self.noise_rng.random_range(1..3u8)) % 3
                } else {
                    c
                }
            })
            .collect()
    }
}

fn run(cfg: &WorldConfig, seed: u64, replay: Option<&[[f32; 2]]>) -> Result<Episode, WorldError> {
    let mut world = World::generate(cfg, seed)?;
    let n = cfg.steps();
    if let Some(a) = replay {
        if a.len() != n {
            return Err(WorldError::ReplayLength { expected: n, got: a.len() });
        }
    }
    let mut labels = Vec::with_capacity(n * cfg.voxels());
    let mut obs = Vec::with_capacity(n * cfg.voxels());
    let mut actions = Vec::with_capacity(n);
    let mut motion = Vec::with_capacity(n);
    for t in 0..n {
        let y = world.crop_labels();
        obs.extend(world.observe(&y));
        labels.extend(y);
        let a = match replay {
            Some(rec) => rec[t],
            None => world.policy_action(),
        };
        actions.push(a);
        motion.push([a[0], a[1], 1.0]);
        world.advance(a);
    }
    Ok(Episode {
        height: cfg.height,
        width: cfg.width,
        z_slabs: cfg.z_slabs,
        classes: cfg.classes,
        t_obs: cfg.t_obs,
        l_future: cfg.l_future,
        n_agents: cfg.n_agents,
        labels,
        obs,
        actions,
        motion,
    })
}

/// Simulates `T + L` steps with the scripted ego policy.
pub fn simulate_episode(cfg: &WorldConfig, seed: u64) -> Result<Episode, WorldError> {
    run(cfg, seed, None)
}

/// Re-simulates with the ego driven by recorded actions instead of the policy.
pub fn replay_episode(cfg: &WorldConfig, seed: u64, actions: &[[f32; 2]]) -> Result<Episode, WorldError> {
    run(cfg, seed, Some(actions))
}
