use rand::{Rng, RngCore};

use super::{Environment, PointMassEnv, Task};

/// Waypoint-following controller that emits whole action chunks.
///
/// On PointGate it drives straight to a decision line, commits to one gate
/// drawn uniformly at the start of the episode, threads the channel and then
/// parks on the goal. On Staged it visits the waypoints in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedExpert {
    /// Distance covered per primitive step, in arena units.
    pub speed: f64,
    /// Distance before the wall at which the expert turns towards its gate.
    pub decision_offset: f64,
    /// Distance before the wall of the point aligned with the gate.
    pub pre_entry: f64,
    /// Distance past the wall the expert travels before turning to the goal.
    pub exit: f64,
    gate: usize,
    phase: usize,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self {
            speed: 0.05,
            decision_offset: 0.35,
            pre_entry: 0.08,
            exit: 0.05,
            gate: 0,
            phase: 0,
        }
    }
}

impl ScriptedExpert {
    pub fn new(speed: f64) -> Self {
        Self {
            speed,
            ..Self::default()
        }
    }

    pub fn gate(&self) -> usize {
        self.gate
    }

    pub fn begin_episode(&mut self, env: &PointMassEnv, rng: &mut dyn RngCore) {
        let gates = match env.task() {
            Task::PointGate(g) => g.gate_centers.len(),
            Task::Staged(_) => 1,
        };
        self.gate = rng.random_range(0..gates);
        self.phase = 0;
    }

    pub fn begin_episode_with_gate(&mut self, gate: usize) {
        self.gate = gate;
        self.phase = 0;
    }

    /// Plans the next chunk from the current position, in normalized actions.
    pub fn chunk(&mut self, env: &PointMassEnv) -> Vec<f64> {
        let n = env.spec().chunk_len;
        let max = env.arena().max_speed;
        let mut pos = env.position();
        let mut out = Vec::with_capacity(2 * n);
        let mut stage = env.stage();
        for _ in 0..n {
            let target = match env.task() {
                Task::PointGate(_) => self.gate_target(env, pos),
                Task::Staged(s) => {
                    if stage < s.waypoints.len() {
                        let w = s.waypoints[stage];
                        let d = ((w[0] - pos[0]).powi(2) + (w[1] - pos[1]).powi(2)).sqrt();
                        if d <= w[2] {
                            stage += 1;
                        }
                    }
                    match s.waypoints.get(stage) {
                        Some(w) => [w[0], w[1]],
                        None => pos,
                    }
                }
            };
            let step = toward(pos, target, self.speed.min(max));
            pos = [pos[0] + step[0], pos[1] + step[1]];
            out.push((step[0] / max).clamp(-1.0, 1.0));
            out.push((step[1] / max).clamp(-1.0, 1.0));
        }
        out
    }

    fn gate_target(&mut self, env: &PointMassEnv, pos: [f64; 2]) -> [f64; 2] {
        let Task::PointGate(g) = env.task() else {
            unreachable!("gate target requested on a gate-free task")
        };
        let c = g.gate_centers[self.gate];
        let decision_x = g.wall_x - self.decision_offset;
        let entry = [g.wall_x - self.pre_entry, c];
        let exit = [g.wall_x + g.wall_thickness + self.exit, c];
        let tol = 1e-9;
        if self.phase == 0 && pos[0] >= decision_x - tol {
            self.phase = 1;
        }
        if self.phase == 1 && near(pos, entry, 1e-6) {
            self.phase = 2;
        }
        if self.phase == 2 && pos[0] >= exit[0] - tol {
            self.phase = 3;
        }
        match self.phase {
            0 => [decision_x, 0.0],
            1 => entry,
            2 => exit,
            _ => g.goal,
        }
    }
}

fn near(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
    (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
}

fn toward(p: [f64; 2], target: [f64; 2], speed: f64) -> [f64; 2] {
    let d = [target[0] - p[0], target[1] - p[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if len <= speed {
        d
    } else {
        [d[0] * speed / len, d[1] * speed / len]
    }
}
