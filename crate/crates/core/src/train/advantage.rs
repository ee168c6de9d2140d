use super::TrainError;

/// Backward GAE recursion. `dones[t]` marks that step `t` ended the episode,
/// so nothing is bootstrapped across it; `last_value` bootstraps the final
/// step when it is not terminal.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, TrainError> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(TrainError::Config(format!(
            "gae length mismatch: {} rewards, {} values, {} flags",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    Ok(adv)
}

/// `J_t = sum_{tau >= t} gamma^(tau - t) r_tau` within one episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Monte-Carlo advantage `J_t - V(o_t)` of each action in one episode.
pub fn env_advantage(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    discounted_returns(rewards, gamma)
        .iter()
        .zip(values)
        .map(|(j, v)| j - v)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_s: f64,
}

/// Adaptor reward on the decision that finishes an action after `stp`
/// denoising steps. `sgn(0)` is taken as +1.
pub fn adaptor_reward(advantage: f64, success: bool, stp: usize, w: RewardWeights) -> f64 {
    let sign = if advantage >= 0.0 { 1.0 } else { -1.0 };
    let s = stp as f64;
    let rs = if success { 1.0 } else { 0.0 };
    w.alpha * advantage * w.gamma_s.powf(sign * s) + w.beta * rs * w.gamma_s.powf(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSchedule {
    pub base: f64,
    pub coef: f64,
    pub rate: f64,
}

impl Default for ClipSchedule {
    fn default() -> Self {
        Self {
            base: 0.001,
            coef: 0.01,
            rate: 3.0,
        }
    }
}

/// Clip range for a denoising step landing on `level`: tight near pure
/// noise, widest for the step that produces the clean chunk.
pub fn dppo_clip(level: usize, steps: usize, c: ClipSchedule) -> f64 {
    let t = 1.0 - level as f64 / steps as f64;
    if t == 0.0 {
        return c.base;
    }
    if t == 1.0 {
        return c.coef;
    }
    c.base + (c.coef - c.base) * ((c.rate * t).exp() - 1.0) / (c.rate.exp() - 1.0)
}

/// Mean-zero, unit-std copy; all-equal inputs map to zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// `mean(baseline totals) / mean(adaptive totals)`.
pub fn acceleration_ratio(baseline: &[usize], adaptive: &[usize]) -> Result<f64, TrainError> {
    if baseline.is_empty() || adaptive.is_empty() {
        return Err(TrainError::Config("acceleration ratio needs non-empty step records".into()));
    }
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    let d = mean(adaptive);
    if d == 0.0 {
        return Err(TrainError::Config("adaptive run recorded zero denoising steps".into()));
    }
    Ok(mean(baseline) / d)
}
