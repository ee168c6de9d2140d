use rand::{Rng, RngCore};

use super::{ChunkOutcome, EnvError, EnvSpec, Environment, RewardConvention};

/// Shared geometry of both point-mass tasks. Positions live in
/// `[-half_width, half_width]^2`; a normalized action of 1 moves the point by
/// `max_speed` along that axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Arena {
    pub half_width: f64,
    pub max_speed: f64,
    pub start_lo: [f64; 2],
    pub start_hi: [f64; 2],
    pub horizon: usize,
    pub chunk_len: usize,
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            max_speed: 0.075,
            start_lo: [-0.85, -0.1],
            start_hi: [-0.65, 0.1],
            horizon: 120,
            chunk_len: 4,
        }
    }
}

/// A wall slab `x in [wall_x, wall_x + wall_thickness]` pierced by gates of
/// half-width `gate_half_width` centred at `gate_centers`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGateSpec {
    pub wall_x: f64,
    pub wall_thickness: f64,
    pub gate_half_width: f64,
    pub gate_centers: Vec<f64>,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    /// Touching the wall before success ends the episode as a failure.
    pub collision_fails: bool,
    /// Width of the strip before the wall counted as the gate approach.
    pub approach_margin: f64,
}

impl Default for PointGateSpec {
    fn default() -> Self {
        Self {
            wall_x: 0.0,
            wall_thickness: 0.15,
            gate_half_width: 0.1,
            gate_centers: vec![-0.4, 0.4],
            goal: [0.7, 0.0],
            goal_radius: 0.1,
            collision_fails: true,
            approach_margin: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagedSpec {
    /// `(x, y, radius)` for each waypoint, visited in order.
    pub waypoints: Vec<[f64; 3]>,
}

impl Default for StagedSpec {
    fn default() -> Self {
        Self {
            waypoints: vec![
                [-0.3, 0.5, 0.08],
                [0.2, 0.6, 0.08],
                [0.5, 0.0, 0.08],
                [0.1, -0.5, 0.08],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    PointGate(PointGateSpec),
    Staged(StagedSpec),
}

/// Coarse location class used to group per-step statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Near the gate (PointGate) or the next waypoint (Staged).
    Approach,
    FreeSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    arena: Arena,
    task: Task,
    spec: EnvSpec,
    solids: Vec<[f64; 4]>,
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
    done: bool,
    success: bool,
    stage: usize,
    collided: bool,
    last_flags: Vec<bool>,
}

impl PointMassEnv {
    pub fn new(arena: Arena, task: Task) -> Result<Self, EnvError> {
        validate(&arena, &task)?;
        let (obs_dim, reward) = match &task {
            Task::PointGate(g) => (6 + 2 * g.gate_centers.len(), RewardConvention::RobomimicSparse),
            Task::Staged(s) => (5 + 2 * s.waypoints.len(), RewardConvention::Staged),
        };
        let spec = EnvSpec {
            obs_dim,
            act_dim: 2,
            chunk_len: arena.chunk_len,
            horizon: arena.horizon,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            reward,
        };
        let solids = match &task {
            Task::PointGate(g) => wall_solids(&arena, g),
            Task::Staged(_) => Vec::new(),
        };
        let start = [
            0.5 * (arena.start_lo[0] + arena.start_hi[0]),
            0.5 * (arena.start_lo[1] + arena.start_hi[1]),
        ];
        Ok(Self {
            arena,
            task,
            spec,
            solids,
            pos: start,
            vel: [0.0; 2],
            t: 0,
            done: false,
            success: false,
            stage: 0,
            collided: false,
            last_flags: Vec::new(),
        })
    }

    pub fn point_gate() -> Self {
        Self::new(Arena::default(), Task::PointGate(PointGateSpec::default()))
            .expect("default geometry is valid")
    }

    pub fn staged() -> Self {
        let arena = Arena {
            start_lo: [-0.8, -0.1],
            start_hi: [-0.6, 0.1],
            ..Arena::default()
        };
        Self::new(arena, Task::Staged(StagedSpec::default())).expect("default geometry is valid")
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    /// Places the point at `pos` with zero velocity and a fresh clock.
    pub fn reset_to(&mut self, pos: [f64; 2]) -> Vec<f64> {
        self.pos = pos;
        self.vel = [0.0; 2];
        self.t = 0;
        self.done = false;
        self.success = false;
        self.stage = 0;
        self.collided = false;
        self.last_flags.clear();
        self.observe()
    }

    pub fn region(&self) -> Region {
        self.region_at(self.pos)
    }

    pub fn region_at(&self, pos: [f64; 2]) -> Region {
        match &self.task {
            Task::PointGate(g) => {
                if pos[0] >= g.wall_x - g.approach_margin && pos[0] <= g.wall_x + g.wall_thickness {
                    Region::Approach
                } else {
                    Region::FreeSpace
                }
            }
            Task::Staged(s) => match s.waypoints.get(self.stage) {
                Some(w) if dist(pos, [w[0], w[1]]) <= 2.5 * w[2] => Region::Approach,
                _ => Region::FreeSpace,
            },
        }
    }

    /// Whether the segment `p -> q` enters a solid wall block.
    pub fn blocked(&self, p: [f64; 2], q: [f64; 2]) -> bool {
        self.solids.iter().any(|r| segment_hits_box(p, q, r).is_some())
    }

    fn apply_move(&mut self, a: [f64; 2]) {
        let hw = self.arena.half_width;
        let p = self.pos;
        let q = [
            (p[0] + a[0] * self.arena.max_speed).clamp(-hw, hw),
            (p[1] + a[1] * self.arena.max_speed).clamp(-hw, hw),
        ];
        let hit = self
            .solids
            .iter()
            .filter_map(|r| segment_hits_box(p, q, r))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
        let fails = matches!(&self.task, Task::PointGate(g) if g.collision_fails);
        let next = match hit {
            None => q,
            Some(t) if fails && !self.success => {
                self.collided = true;
                self.done = true;
                [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
            }
            Some(_) => p,
        };
        let s = self.arena.max_speed;
        self.vel = [(next[0] - p[0]) / s, (next[1] - p[1]) / s];
        self.pos = next;
    }

    fn step_reward(&mut self) -> f64 {
        match &self.task {
            Task::PointGate(g) => {
                if !self.collided && dist(self.pos, g.goal) <= g.goal_radius {
                    self.success = true;
                }
                if self.success {
                    1.0
                } else {
                    0.0
                }
            }
            Task::Staged(s) => {
                let Some(w) = s.waypoints.get(self.stage) else {
                    return 0.0;
                };
                if dist(self.pos, [w[0], w[1]]) <= w[2] {
                    self.stage += 1;
                    if self.stage == s.waypoints.len() {
                        self.success = true;
                        self.done = true;
                    }
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Environment for PointMassEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let (lo, hi) = (self.arena.start_lo, self.arena.start_hi);
        let x = lo[0] + (hi[0] - lo[0]) * rng.random::<f64>();
        let y = lo[1] + (hi[1] - lo[1]) * rng.random::<f64>();
        self.reset_to([x, y])
    }

    fn step_chunk(&mut self, chunk: &[f64]) -> Result<ChunkOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        if chunk.len() != self.spec.chunk_dim() {
            return Err(EnvError::ChunkSize {
                expected: self.spec.chunk_dim(),
                actual: chunk.len(),
            });
        }
        let mut rewards = Vec::with_capacity(self.spec.chunk_len);
        self.last_flags.clear();
        for a in chunk.chunks(2) {
            if self.done {
                break;
            }
            self.apply_move([a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]);
            let r = self.step_reward();
            rewards.push(r);
            self.last_flags.push(self.success);
            self.t += 1;
            if self.t >= self.spec.horizon {
                self.done = true;
            }
        }
        Ok(ChunkOutcome {
            obs: self.observe(),
            rewards,
            done: self.done,
            success: self.success,
        })
    }

    fn observe(&self) -> Vec<f64> {
        let mut o = Vec::with_capacity(self.spec.obs_dim);
        o.extend_from_slice(&self.pos);
        o.extend_from_slice(&self.vel);
        match &self.task {
            Task::PointGate(g) => {
                for &c in &g.gate_centers {
                    o.push(g.wall_x - self.pos[0]);
                    o.push(c - self.pos[1]);
                }
                o.push(g.goal[0] - self.pos[0]);
                o.push(g.goal[1] - self.pos[1]);
            }
            Task::Staged(s) => {
                for w in &s.waypoints {
                    o.push(w[0] - self.pos[0]);
                    o.push(w[1] - self.pos[1]);
                }
                o.push(self.stage as f64 / s.waypoints.len() as f64);
            }
        }
        o
    }

    fn time(&self) -> usize {
        self.t
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn succeeded(&self) -> bool {
        self.success
    }

    fn last_success_flags(&self) -> &[bool] {
        &self.last_flags
    }

    fn state_vector(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.t as f64,
            self.done as u8 as f64,
            self.success as u8 as f64,
            self.stage as f64,
            self.collided as u8 as f64,
        ]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn validate(arena: &Arena, task: &Task) -> Result<(), EnvError> {
    let bad = |m: String| Err(EnvError::InvalidSpec(m));
    let hw = arena.half_width;
    if !(hw > 0.0) || !(arena.max_speed > 0.0) {
        return bad("arena half-width and max speed must be positive".into());
    }
    if arena.horizon == 0 || arena.chunk_len == 0 || !arena.horizon.is_multiple_of(arena.chunk_len) {
        return bad(format!(
            "horizon {} must be a positive multiple of chunk length {}",
            arena.horizon, arena.chunk_len
        ));
    }
    for d in 0..2 {
        if !(arena.start_lo[d] <= arena.start_hi[d]) || arena.start_lo[d] < -hw || arena.start_hi[d] > hw {
            return bad("start region must be a box inside the arena".into());
        }
    }
    match task {
        Task::PointGate(g) => {
            if !(g.gate_half_width > 0.0 && g.gate_half_width < hw) {
                return bad(format!("gate half-width {} must lie in (0, {hw})", g.gate_half_width));
            }
            if g.gate_centers.is_empty() {
                return bad("at least one gate is required".into());
            }
            if !(g.wall_thickness > 0.0) {
                return bad("wall thickness must be positive".into());
            }
            let mut centers = g.gate_centers.clone();
            centers.sort_by(f64::total_cmp);
            for w in centers.windows(2) {
                if w[1] - w[0] <= 2.0 * g.gate_half_width {
                    return bad("gates overlap".into());
                }
            }
            if centers.iter().any(|c| c.abs() + g.gate_half_width > hw) {
                return bad("gates must lie inside the arena".into());
            }
            if g.goal[0] - g.goal_radius <= g.wall_x + g.wall_thickness {
                return bad("goal must lie beyond the wall".into());
            }
            if arena.start_hi[0] >= g.wall_x {
                return bad("start region must lie before the wall".into());
            }
            if !(g.goal_radius > 0.0) {
                return bad("goal radius must be positive".into());
            }
        }
        Task::Staged(s) => {
            if s.waypoints.len() != 4 {
                return bad(format!("staged task needs 4 waypoints, got {}", s.waypoints.len()));
            }
            for (i, a) in s.waypoints.iter().enumerate() {
                if !(a[2] > 0.0) {
                    return bad("waypoint radius must be positive".into());
                }
                for b in &s.waypoints[i + 1..] {
                    if dist([a[0], a[1]], [b[0], b[1]]) <= a[2] + b[2] {
                        return bad("waypoints must be pairwise disjoint".into());
                    }
                }
            }
        }
    }
    Ok(())
}

/// Solid parts of the wall slab as `[x0, x1, y0, y1]` boxes.
fn wall_solids(arena: &Arena, g: &PointGateSpec) -> Vec<[f64; 4]> {
    let (x0, x1) = (g.wall_x, g.wall_x + g.wall_thickness);
    let mut centers = g.gate_centers.clone();
    centers.sort_by(f64::total_cmp);
    let mut boxes = Vec::new();
    let mut lo = -arena.half_width;
    for c in centers {
        boxes.push([x0, x1, lo, c - g.gate_half_width]);
        lo = c + g.gate_half_width;
    }
    boxes.push([x0, x1, lo, arena.half_width]);
    boxes
}

/// Entry parameter in `[0, 1]` of the segment `p -> q` into the box interior.
fn segment_hits_box(p: [f64; 2], q: [f64; 2], b: &[f64; 4]) -> Option<f64> {
    let d = [q[0] - p[0], q[1] - p[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let bounds = [(b[0], b[1]), (b[2], b[3])];
    for axis in 0..2 {
        let (lo, hi) = bounds[axis];
        if d[axis] == 0.0 {
            if p[axis] <= lo || p[axis] >= hi {
                return None;
            }
            continue;
        }
        let mut ta = (lo - p[axis]) / d[axis];
        let mut tb = (hi - p[axis]) / d[axis];
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some(t0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_box_intersection() {
        let b = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(segment_hits_box([-1.0, 0.5], [0.5, 0.5], &b), Some(2.0 / 3.0));
        assert_eq!(segment_hits_box([-1.0, 2.0], [0.5, 2.0], &b), None);
        assert_eq!(segment_hits_box([-1.0, 0.5], [-0.5, 0.5], &b), None);
        // grazing the boundary does not count as entering
        assert_eq!(segment_hits_box([-1.0, 1.0], [2.0, 1.0], &b), None);
    }

    #[test]
    fn wall_has_one_more_block_than_gates() {
        let env = PointMassEnv::point_gate();
        assert_eq!(env.solids.len(), 3);
        assert!(env.blocked([-0.1, 0.0], [0.05, 0.0]));
        assert!(!env.blocked([-0.1, 0.4], [0.05, 0.4]));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let g = PointGateSpec {
            gate_half_width: 0.0,
            ..PointGateSpec::default()
        };
        assert!(PointMassEnv::new(Arena::default(), Task::PointGate(g)).is_err());
        let arena = Arena {
            horizon: 10,
            chunk_len: 4,
            ..Arena::default()
        };
        assert!(PointMassEnv::new(arena, Task::PointGate(PointGateSpec::default())).is_err());
        let s = StagedSpec {
            waypoints: vec![[0.0, 0.0, 0.1]; 4],
        };
        assert!(PointMassEnv::new(Arena::default(), Task::Staged(s)).is_err());
    }
}
