//! Eviction policies compared in the harness, and per-layer budget plans.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_weights, HeadInstance};
use crate::error::{Error, Result};
use crate::indicator::indicator_matrix;
use crate::smoothing::{select_top_b, smoothed_indicator, EvictionDecision, SmoothedScores, SmoothingConfig};

pub const DEFAULT_KERNEL: usize = 5;
pub const DEFAULT_SINK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Smoothed output-reconstruction indicator.
    RestKv,
    /// Window-mean attention weight, average-pooled along keys.
    SnapAttn,
    /// Attention sink plus most recent tokens.
    Streaming,
    /// Recent window plus a uniform sample of the rest.
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::RestKv,
        PolicyKind::SnapAttn,
        PolicyKind::Streaming,
        PolicyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::RestKv => "rest_kv",
            PolicyKind::SnapAttn => "snap_attn",
            PolicyKind::Streaming => "streaming",
            PolicyKind::Random => "random",
        }
    }

    /// Whether the policy always keeps the observation window.
    pub fn pins_window(self) -> bool {
        !matches!(self, PolicyKind::Streaming)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::domain(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Pooling kernel for `snap_attn`; odd.
    pub kernel: usize,
    /// Sink size for `streaming`.
    pub sink: usize,
    /// Seed for `random`.
    pub seed: u64,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            kernel: DEFAULT_KERNEL,
            sink: DEFAULT_SINK,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "pooling kernel {} must be odd and >= 1",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Smallest budget this policy can honour on a prompt of `prompt_len`.
    pub fn min_budget(&self, prompt_len: usize, window: usize) -> usize {
        match self.kind {
            PolicyKind::Streaming => self.sink + 1,
            _ => window.min(prompt_len).max(1),
        }
    }

    /// Scores (where applicable) and selects the kept rows for one head.
    pub fn decide(
        &self,
        instance: &HeadInstance,
        budget: usize,
        cfg: &SmoothingConfig,
        layer: usize,
        head: usize,
    ) -> Result<EvictionDecision> {
        self.validate()?;
        let n = instance.cache.len();
        let decision = match self.kind {
            PolicyKind::RestKv => {
                let scores = if n <= cfg.window {
                    SmoothedScores::from_entries(vec![None; n])?
                } else {
                    let im = indicator_matrix(instance)?;
                    smoothed_indicator(&im, budget, cfg)?
                };
                select_top_b(&scores, budget)?
            }
            PolicyKind::SnapAttn => {
                select_top_b(&snap_attn_scores(instance, self.kernel)?, budget)?
            }
            PolicyKind::Streaming => streaming_keep(n, budget, self.sink)?,
            PolicyKind::Random => {
                random_keep(n, budget, cfg.window, mix_seed(self.seed, layer, head))?
            }
        };
        Ok(decision.at(layer, head))
    }
}

// splitmix64 finalizer over (seed, layer, head).
fn mix_seed(seed: u64, layer: usize, head: usize) -> u64 {
    let mut z = seed ^ ((layer as u64) << 32 | head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean attention each older key receives from the window queries, then
/// average-pooled along the key axis. The window's own keys are pinned.
pub fn snap_attn_scores(instance: &HeadInstance, kernel: usize) -> Result<SmoothedScores> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::domain(format!("pooling kernel {kernel} must be odd")));
    }
    let n = instance.cache.len();
    let window = instance.queries().rows();
    if n <= window {
        return SmoothedScores::from_entries(vec![None; n]);
    }
    let scored = n - window;
    let mut mean = vec![0.0; scored];
    for t in 0..window {
        let a = attention_weights(instance.queries().row(t), &instance.visible_cache(t))?;
        for (m, w) in mean.iter_mut().zip(a.weights()) {
            *m += w;
        }
    }
    mean.iter_mut().for_each(|m| *m /= window as f64);
    SmoothedScores::with_pinned_tail(avg_pool(&mean, kernel), window)
}

/// 1-D average pooling, stride 1, truncated at the edges and normalized by
/// the number of covered entries.
pub fn avg_pool(xs: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let mut prefix = vec![0.0; xs.len() + 1];
    for (i, x) in xs.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            ((prefix[hi] - prefix[lo]) / (hi - lo) as f64).max(0.0)
        })
        .collect()
}

/// First `sink` rows plus the most recent `budget - sink`.
pub fn streaming_keep(n: usize, budget: usize, sink: usize) -> Result<EvictionDecision> {
    if budget <= sink {
        return Err(Error::BudgetTooSmall {
            budget,
            minimum: sink + 1,
        });
    }
    if budget >= n {
        return EvictionDecision::new((0..n).collect(), budget, n);
    }
    let recent_start = n - (budget - sink);
    let kept = (0..sink.min(n)).chain(recent_start.max(sink)..n).collect();
    EvictionDecision::new(kept, budget, n)
}

/// The last `window` rows plus a seeded uniform sample of the older ones.
pub fn random_keep(n: usize, budget: usize, window: usize, seed: u64) -> Result<EvictionDecision> {
    if budget == 0 {
        return Err(Error::domain("budget must be at least 1"));
    }
    let total = budget.min(n);
    let pinned = window.min(total);
    let older = n - pinned;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = sample(&mut rng, older, total - pinned).into_vec();
    kept.extend(older..n);
    kept.sort_unstable();
    EvictionDecision::new(kept, budget, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Uniform,
    Pyramid,
}

impl FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(PlanKind::Uniform),
            "pyramid" => Ok(PlanKind::Pyramid),
            other => Err(Error::domain(format!("unknown budget plan '{other}'"))),
        }
    }
}

/// Per-layer, per-head KV budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub per_layer: Vec<usize>,
}

impl BudgetPlan {
    pub fn total(&self) -> usize {
        self.per_layer.iter().sum()
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }
}

/// Uniform: `n` everywhere. Pyramid: a linear ramp from `2n - m` at the first
/// layer to `m = max(1, window)` at the last, rounded by largest remainder so
/// the total stays `n * layers`.
pub fn make_budget_plan(kind: PlanKind, layers: usize, n: usize, window: usize) -> Result<BudgetPlan> {
    if layers == 0 || n == 0 {
        return Err(Error::domain("budget plan needs at least one layer and n >= 1"));
    }
    let per_layer = match kind {
        PlanKind::Uniform => vec![n; layers],
        PlanKind::Pyramid if layers == 1 => vec![n],
        PlanKind::Pyramid => {
            let bottom = window.max(1) as f64;
            let top = 2.0 * n as f64 - bottom;
            let ramp: Vec<f64> = (0..layers)
                .map(|l| top + (bottom - top) * l as f64 / (layers - 1) as f64)
                .collect();
            if ramp.iter().any(|&r| r < 1.0) {
                return Err(Error::domain(format!(
                    "pyramid plan with n = {n} and window = {window} gives a layer below 1"
                )));
            }
            largest_remainder(&ramp, n * layers)
        }
    };
    if per_layer.contains(&0) {
        return Err(Error::domain("budget plan has an empty layer"));
    }
    Ok(BudgetPlan { per_layer })
}

fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}
