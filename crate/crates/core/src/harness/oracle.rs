//! Randomized cross-checks of the closed-form indicator against brute-force
//! removal, used by the `oracle-check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_logits, attention_weights, HeadParams, KvCache};
use crate::error::Result;
use crate::indicator::{closed_form_indicator, greedy_vs_exhaustive, removal_oracle, renormalized_weights, softmax_without};
use crate::numerics::RealMatrix;

/// A random single-query head instance.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub query: Vec<f64>,
    pub cache: KvCache,
    pub params: HeadParams,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Result<RealMatrix> {
    RealMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Cache length in `[2, max_n]`; `d_k`, `d_v`, `d_model` in `[2, 16]`.
pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> Result<RandomInstance> {
    let n = rng.random_range(2..=max_n.max(2));
    let d_k = rng.random_range(2..=16);
    let d_v = rng.random_range(2..=16);
    let d_model = rng.random_range(2..=16);
    let params = HeadParams::new(
        uniform_matrix(rng, d_model, d_k, 1.0)?,
        uniform_matrix(rng, d_model, d_k, 1.0)?,
        uniform_matrix(rng, d_model, d_v, 1.0)?,
        uniform_matrix(rng, d_v, d_model, 1.0)?,
    )?;
    let key_scale = rng.random_range(0.5..3.0);
    let cache = KvCache::from_parts(
        uniform_matrix(rng, n, d_k, key_scale)?,
        uniform_matrix(rng, n, d_v, 2.0)?,
    )?;
    let query = (0..d_k).map(|_| rng.random_range(-2.0..2.0)).collect();
    Ok(RandomInstance { query, cache, params })
}

#[derive(Debug, Clone, Default)]
pub struct EquivalenceSummary {
    pub trials: usize,
    pub comparisons: usize,
    /// Largest `|closed - brute| / max(1, brute)` seen.
    pub worst: f64,
    pub failures: usize,
    /// Instances whose `1 - A[n]` fell below machine epsilon; not compared.
    pub skipped: usize,
}

impl EquivalenceSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Closed form vs brute-force removal on every key of `trials` instances.
pub fn check_equivalence(trials: usize, max_n: usize, tol: f64, seed: u64) -> Result<EquivalenceSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = EquivalenceSummary {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let inst = random_instance(&mut rng, max_n)?;
        let weights = attention_weights(&inst.query, &inst.cache)?;
        for n in 0..inst.cache.len() {
            if 1.0 - weights.weights()[n] < f64::EPSILON {
                s.skipped += 1;
                continue;
            }
            let brute = removal_oracle(&inst.query, &inst.cache, &inst.params, n)?;
            let closed = closed_form_indicator(&inst.query, &inst.cache, &inst.params, n)?;
            let rel = (closed - brute).abs() / brute.max(1.0);
            s.comparisons += 1;
            s.worst = s.worst.max(rel);
            if rel > tol {
                s.failures += 1;
            }
        }
    }
    Ok(s)
}

/// Largest deviation between renormalized weights and softmax over the
/// remaining logits.
pub fn check_renormalization(rows: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rows {
        let inst = random_instance(&mut rng, 64)?;
        let logits = attention_logits(&inst.query, &inst.cache)?;
        let weights = attention_weights(&inst.query, &inst.cache)?;
        let n = rng.random_range(0..inst.cache.len());
        let renorm = renormalized_weights(&weights, n)?;
        let direct = softmax_without(&logits, n)?;
        for (a, b) in renorm.weights().iter().zip(direct.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Mean and worst ratio of greedy top-B error to the exhaustive optimum over
/// tiny instances (N <= 10, B <= 5). Informational only.
pub fn greedy_gap_report(trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::new();
    for _ in 0..trials {
        let inst = random_instance(&mut rng, 10)?;
        let n = inst.cache.len();
        if n < 3 {
            continue;
        }
        let budget = rng.random_range(1..=(n - 1).min(5));
        let (greedy, best) = greedy_vs_exhaustive(&inst.query, &inst.cache, &inst.params, budget)?;
        if best > 1e-12 {
            ratios.push(greedy / best);
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let worst = ratios.iter().copied().fold(1.0, f64::max);
    Ok((mean, worst))
}
