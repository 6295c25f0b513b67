//! Temporal and spatial smoothing of raw importance, and top-B selection.
//!
//! Keys older than the observation window get the EMA of their column over the
//! window's queries (oldest to newest). The last `window` keys are pinned and
//! always kept. The EMA scores are then averaged over a sliding window of
//! neighbouring keys whose width and offset follow the drift between the
//! top-B centroids of the front and rear halves of the query window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicator::ImportanceMatrix;

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_BETA: f64 = 2000.0;
pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// EMA weight of the newest query, in (0, 1].
    pub alpha: f64,
    /// Key-index distance per unit of window growth and shift.
    pub beta: f64,
    /// Observation window; must be even.
    pub window: usize,
}

impl SmoothingConfig {
    pub fn new(alpha: f64, beta: f64, window: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::domain(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::domain(format!("beta {} must be positive", self.beta)));
        }
        if self.window == 0 || !self.window.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "window {} must be even and positive",
                self.window
            )));
        }
        Ok(())
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            window: DEFAULT_WINDOW,
        }
    }
}

/// Per-key scores; `None` marks a pinned key that must always be kept.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedScores {
    entries: Vec<Option<f64>>,
}

impl SmoothedScores {
    pub fn from_entries(entries: Vec<Option<f64>>) -> Result<Self> {
        if entries.iter().flatten().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::domain("scores must be finite and non-negative"));
        }
        Ok(Self { entries })
    }

    /// `scores` followed by `pinned` pinned positions.
    pub fn with_pinned_tail(scores: Vec<f64>, pinned: usize) -> Result<Self> {
        let mut entries: Vec<Option<f64>> = scores.into_iter().map(Some).collect();
        entries.extend(std::iter::repeat_n(None, pinned));
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score(&self, n: usize) -> Option<f64> {
        self.entries[n]
    }

    pub fn is_pinned(&self, n: usize) -> bool {
        self.entries[n].is_none()
    }

    pub fn pinned_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_none()).count()
    }

    pub fn entries(&self) -> &[Option<f64>] {
        &self.entries
    }
}

/// Smoothing window derived from the front/rear importance centroids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub d_front: f64,
    pub d_rear: f64,
    /// Odd window width.
    pub width: usize,
    pub shift: i64,
}

impl SpatialParams {
    pub fn from_centroids(d_front: f64, d_rear: f64, beta: f64) -> Self {
        let drift = d_front - d_rear;
        let steps = (drift.abs() / beta).floor() as usize;
        let shift = if drift > 0.0 {
            (drift / beta).floor() as i64
        } else {
            (drift / beta).floor() as i64 + 1
        };
        Self {
            d_front,
            d_rear,
            width: 2 * steps + 1,
            shift,
        }
    }
}

/// Which keys survive eviction for one head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDecision {
    /// Strictly increasing cache row indices.
    pub kept: Vec<usize>,
    pub budget: usize,
    pub layer: usize,
    pub head: usize,
}

impl EvictionDecision {
    pub fn new(kept: Vec<usize>, budget: usize, cache_len: usize) -> Result<Self> {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("kept indices must be strictly increasing"));
        }
        if kept.last().is_some_and(|&k| k >= cache_len) {
            return Err(Error::domain("kept index out of range"));
        }
        Ok(Self {
            kept,
            budget,
            layer: 0,
            head: 0,
        })
    }

    pub fn at(mut self, layer: usize, head: usize) -> Self {
        self.layer = layer;
        self.head = head;
        self
    }
}

/// Exponential moving average, newest element last.
pub fn ema(series: &[f64], alpha: f64) -> Result<f64> {
    let (first, rest) = series
        .split_first()
        .ok_or_else(|| Error::domain("EMA of an empty series"))?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("alpha {alpha} not in (0, 1]")));
    }
    Ok(rest
        .iter()
        // Equal inputs short-circuit so constant series are an exact fixed point.
        .fold(*first, |acc, &x| {
            if x == acc {
                acc
            } else {
                alpha * x + (1.0 - alpha) * acc
            }
        }))
}

pub fn temporal_smooth(im: &ImportanceMatrix, cfg: &SmoothingConfig) -> Result<SmoothedScores> {
    if im.window() != cfg.window {
        return Err(Error::domain(format!(
            "importance matrix has {} query rows, expected {}",
            im.window(),
            cfg.window
        )));
    }
    let n = im.keys();
    if n <= cfg.window {
        return SmoothedScores::from_entries(vec![None; n]);
    }
    let scored = n - cfg.window;
    let mut column = vec![0.0; cfg.window];
    let mut scores = Vec::with_capacity(scored);
    for key in 0..scored {
        for (t, c) in column.iter_mut().enumerate() {
            *c = im.get(t, key);
        }
        scores.push(ema(&column, cfg.alpha)?);
    }
    SmoothedScores::with_pinned_tail(scores, cfg.window)
}

// Top-k indices of a row, highest score first, ties toward the lower index.
fn top_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let k = k.min(row.len());
    let cmp = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    idx
}

pub fn spatial_params(im: &ImportanceMatrix, budget: usize, cfg: &SmoothingConfig) -> Result<SpatialParams> {
    if budget == 0 {
        return Err(Error::domain("budget must be at least 1"));
    }
    let rows = im.window();
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(Error::domain(format!(
            "query window {rows} must be even and positive"
        )));
    }
    let per_row = budget.min(im.keys());
    if per_row == 0 {
        return Ok(SpatialParams::from_centroids(0.0, 0.0, cfg.beta));
    }
    let half = rows / 2;
    let centroid = |range: std::ops::Range<usize>| -> f64 {
        let total: usize = range
            .map(|t| top_indices(im.row(t), per_row).into_iter().sum::<usize>())
            .sum();
        total as f64 / (per_row * half) as f64
    };
    Ok(SpatialParams::from_centroids(
        centroid(0..half),
        centroid(half..rows),
        cfg.beta,
    ))
}

pub fn spatial_smooth(scores: &SmoothedScores, sp: &SpatialParams) -> Result<SmoothedScores> {
    if sp.width.is_multiple_of(2) {
        return Err(Error::domain(format!("window width {} must be odd", sp.width)));
    }
    let n = scores.len() as i64;
    let half = (sp.width / 2) as i64;
    let entries = scores
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let own = (*e)?;
            let lo = (i as i64 - half + sp.shift).max(0);
            let hi = (i as i64 + half + sp.shift).min(n - 1);
            let (sum, count) = (lo..=hi)
                .filter_map(|k| scores.entries()[k as usize])
                .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
            Some(if count == 0 { own } else { sum / count as f64 })
        })
        .collect();
    SmoothedScores::from_entries(entries)
}

/// Keeps every pinned key plus the best-scoring others, `min(budget, N)` in total.
pub fn select_top_b(scores: &SmoothedScores, budget: usize) -> Result<EvictionDecision> {
    if budget == 0 {
        return Err(Error::domain("budget must be at least 1"));
    }
    let pinned = scores.pinned_count();
    if budget < pinned {
        return Err(Error::BudgetTooSmall {
            budget,
            minimum: pinned,
        });
    }
    let n = scores.len();
    let free = budget.min(n) - pinned;
    let mut candidates: Vec<(usize, f64)> = scores
        .entries()
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.map(|s| (i, s)))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = (0..n).filter(|&i| scores.is_pinned(i)).collect();
    kept.extend(candidates.into_iter().take(free).map(|(i, _)| i));
    kept.sort_unstable();
    EvictionDecision::new(kept, budget, n)
}

/// EMA, then adaptive-window averaging: the full smoothed indicator for one head.
pub fn smoothed_indicator(
    im: &ImportanceMatrix,
    budget: usize,
    cfg: &SmoothingConfig,
) -> Result<SmoothedScores> {
    let temporal = temporal_smooth(im, cfg)?;
    let sp = spatial_params(im, budget, cfg)?;
    spatial_smooth(&temporal, &sp)
}
