use std::fmt;

/// Training phase of the staged schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Base policy fine-tuned alone at a fixed stride.
    Warmup,
    /// Base policy and adaptor updated together for `e` epochs.
    Joint,
    /// Like `Joint` with `e_slow` epochs.
    Conservative,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Conservative => "conservative",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Stage::Warmup => 0,
            Stage::Joint => 1,
            Stage::Conservative => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Stage::Warmup),
            1 => Some(Stage::Joint),
            2 => Some(Stage::Conservative),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Monotone three-stage state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct StageController {
    pub stage: Stage,
    /// Mean episodic return that ends the warm-up.
    pub zeta1: f64,
    /// Mean denoising steps per action below which training turns conservative.
    pub zeta2: f64,
    pub warmup_stride: usize,
    pub epochs: usize,
    pub epochs_slow: usize,
    /// `(iteration, stage entered)` for every transition taken.
    pub transitions: Vec<(usize, Stage)>,
}

impl StageController {
    pub fn new(zeta1: f64, zeta2: f64, warmup_stride: usize, epochs: usize, epochs_slow: usize) -> Self {
        let mut c = Self {
            stage: Stage::Warmup,
            zeta1,
            zeta2,
            warmup_stride,
            epochs,
            epochs_slow,
            transitions: Vec::new(),
        };
        if zeta1 == f64::NEG_INFINITY {
            c.enter(0, Stage::Joint);
        }
        c
    }

    pub fn epochs(&self) -> usize {
        match self.stage {
            Stage::Conservative => self.epochs_slow,
            _ => self.epochs,
        }
    }

    fn enter(&mut self, iteration: usize, stage: Stage) {
        if stage > self.stage {
            self.stage = stage;
            self.transitions.push((iteration, stage));
        }
    }

    /// Advances after an iteration with the given rollout statistics. Returns
    /// the stage entered, if any.
    pub fn observe(&mut self, iteration: usize, mean_return: f64, mean_steps: f64) -> Option<Stage> {
        let before = self.stage;
        match self.stage {
            Stage::Warmup if mean_return >= self.zeta1 => self.enter(iteration + 1, Stage::Joint),
            Stage::Joint if mean_steps < self.zeta2 => self.enter(iteration + 1, Stage::Conservative),
            _ => {}
        }
        (self.stage != before).then_some(self.stage)
    }
}
