//! Output-reconstruction importance of individual KV pairs.
//!
//! The importance of pair `n` for a query is the L2 change of the head output
//! when `n` is dropped from the cache. Dropping `n` renormalizes the surviving
//! attention weights by `1 / (1 - A[n])`, which collapses the brute-force
//! difference into
//!
//! ```text
//! I[n] = A[n] / (1 - A[n]) * || out - v_n W_O ||
//! ```
//!
//! [`removal_oracle`] computes the left-hand side by actually removing the
//! row; [`closed_form_indicator`] and [`indicator_matrix`] use the closed form.

use rayon::prelude::*;

use crate::attention::{
    attention_logits, mha_output, AttentionRow, HeadInstance, HeadParams,
    KvCache,
};
use crate::error::{Error, Result};
use crate::numerics::{l2_distance, l2_norm, matmul, stable_softmax, vec_mat, RealMatrix, RealVector};

/// Floor for `1 - A[n]` when one logit swamps all others.
pub const MIN_COMPLEMENT: f64 = 1e-300;

/// Raw indicator values: one row per window query, one column per cache row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    scores: RealMatrix,
    query_positions: Vec<usize>,
}

impl ImportanceMatrix {
    pub fn new(scores: RealMatrix, query_positions: Vec<usize>) -> Result<Self> {
        if query_positions.len() != scores.rows() {
            return Err(Error::domain(format!(
                "{} query positions for {} rows",
                query_positions.len(),
                scores.rows()
            )));
        }
        if scores.as_slice().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("importance scores must be non-negative"));
        }
        Ok(Self {
            scores,
            query_positions,
        })
    }

    /// Number of window queries.
    pub fn window(&self) -> usize {
        self.scores.rows()
    }

    /// Number of keys.
    pub fn keys(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.scores.row(t)
    }

    pub fn get(&self, t: usize, n: usize) -> f64 {
        self.scores.get(t, n)
    }

    pub fn scores(&self) -> &RealMatrix {
        &self.scores
    }

    pub fn query_positions(&self) -> &[usize] {
        &self.query_positions
    }

    /// Same matrix with every entry multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if c.is_nan() || c <= 0.0 {
            return Err(Error::domain("scale factor must be positive"));
        }
        let data = self.scores.as_slice().iter().map(|x| x * c).collect();
        Self::new(
            RealMatrix::new(self.scores.rows(), self.scores.cols(), data)?,
            self.query_positions.clone(),
        )
    }
}

/// How indicator rows from query heads sharing one KV head are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[non_exhaustive]
pub enum GroupAggregation {
    #[default]
    Mean,
}

/// Combines the importance matrices of a query group that shares one KV head.
pub fn aggregate_query_group(
    members: &[ImportanceMatrix],
    how: GroupAggregation,
) -> Result<ImportanceMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::domain("empty query group"))?;
    if members.iter().any(|m| {
        m.window() != first.window()
            || m.keys() != first.keys()
            || m.query_positions != first.query_positions
    }) {
        return Err(Error::domain("query group members disagree in shape"));
    }
    let GroupAggregation::Mean = how;
    let k = members.len() as f64;
    let mut data = vec![0.0; first.scores.as_slice().len()];
    for m in members {
        for (d, s) in data.iter_mut().zip(m.scores.as_slice()) {
            *d += s;
        }
    }
    data.iter_mut().for_each(|d| *d /= k);
    ImportanceMatrix::new(
        RealMatrix::new(first.window(), first.keys(), data)?,
        first.query_positions.clone(),
    )
}

/// `a / (1 - a)`, the attention amplifier.
pub fn amplifier(a: f64) -> f64 {
    a / (1.0 - a).max(MIN_COMPLEMENT)
}

// A[n]/(1-A[n]) for every n, computed as exp(l_n) / sum_{m != n} exp(l_m) so
// the dominant entry does not lose precision to 1 - A.
fn amplifiers_from_logits(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, l)| if l > best.1 { (i, l) } else { best });
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let others_of_max: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, e)| e)
        .sum();
    let amps = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let rest = if i == argmax { others_of_max } else { total - e };
            e / rest.max(MIN_COMPLEMENT)
        })
        .collect();
    let weights = exps.iter().map(|e| e / total).collect();
    (amps, weights)
}

fn check_removal(cache: &KvCache, n: usize) -> Result<()> {
    if cache.len() < 2 {
        return Err(Error::domain(
            "removing a pair from a cache of length < 2 leaves it empty",
        ));
    }
    if n >= cache.len() {
        return Err(Error::domain(format!(
            "index {n} out of range for cache of length {}",
            cache.len()
        )));
    }
    Ok(())
}

/// Brute force: L2 change of the head output when row `n` is deleted.
pub fn removal_oracle(q: &[f64], cache: &KvCache, params: &HeadParams, n: usize) -> Result<f64> {
    check_removal(cache, n)?;
    let full = mha_output(q, cache, params)?;
    let reduced = mha_output(q, &cache.without_row(n)?, params)?;
    Ok(l2_distance(&full, &reduced))
}

pub fn closed_form_indicator(
    q: &[f64],
    cache: &KvCache,
    params: &HeadParams,
    n: usize,
) -> Result<f64> {
    check_removal(cache, n)?;
    let logits = attention_logits(q, cache)?;
    let (amps, _) = amplifiers_from_logits(&logits);
    let out = mha_output(q, cache, params)?;
    let own = vec_mat(cache.values().row(n), params.w_o())?;
    Ok(amps[n] * l2_distance(&out, &own))
}

/// Attention row with entry `n` removed and the rest rescaled to sum to one.
pub fn renormalized_weights(weights: &AttentionRow, n: usize) -> Result<AttentionRow> {
    let w = weights.weights();
    if w.len() < 2 {
        return Err(Error::domain("cannot renormalize a row of length < 2"));
    }
    if n >= w.len() {
        return Err(Error::domain(format!(
            "index {n} out of range for row of length {}",
            w.len()
        )));
    }
    let complement: f64 = w
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != n)
        .map(|(_, a)| a)
        .sum();
    let rest = w
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != n)
        .map(|(_, a)| a / complement.max(MIN_COMPLEMENT))
        .collect();
    AttentionRow::new(RealVector::new(rest)?)
}

/// Closed-form indicator for every (window query, key) pair of a head.
///
/// `V·W_O` is computed once and reused for every query. Keys a query cannot
/// see (later positions) score 0 for that row.
pub fn indicator_matrix(instance: &HeadInstance) -> Result<ImportanceMatrix> {
    let cache = &instance.cache;
    if cache.len() < 2 {
        return Err(Error::domain("indicator needs a cache of length >= 2"));
    }
    let projected = matmul(cache.values(), instance.params.w_o())?;
    let n = cache.len();
    let rows: Vec<Result<Vec<f64>>> = (0..instance.queries().rows())
        .into_par_iter()
        .map(|t| {
            let visible = cache.visible_len(instance.query_positions()[t]);
            let mut row = vec![0.0; n];
            if visible < 2 {
                // A lone visible key cannot be removed without emptying the cache.
                return Ok(row);
            }
            let logits = attention_logits(instance.queries().row(t), &cache.prefix(visible))?;
            let (amps, weights) = amplifiers_from_logits(&logits);
            let mut out = vec![0.0; projected.cols()];
            for (w, p) in weights.iter().zip(projected.row_iter()) {
                for (o, x) in out.iter_mut().zip(p) {
                    *o += w * x;
                }
            }
            for (m, slot) in row.iter_mut().take(visible).enumerate() {
                *slot = amps[m] * l2_distance(&out, projected.row(m));
            }
            Ok(row)
        })
        .collect();
    let mut data = Vec::with_capacity(instance.queries().rows() * n);
    for r in rows {
        data.extend(r?);
    }
    ImportanceMatrix::new(
        RealMatrix::new(instance.queries().rows(), n, data)?,
        instance.query_positions().to_vec(),
    )
}

/// The two vectors whose difference is the indicator: the removed pair's lost
/// contribution and the gain redistributed onto the survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPartDecomposition {
    pub removed_loss: RealVector,
    pub redistribution_gain: RealVector,
}

impl TwoPartDecomposition {
    pub fn removed_loss_norm(&self) -> f64 {
        l2_norm(&self.removed_loss)
    }

    /// `|| removed_loss - redistribution_gain ||`
    pub fn indicator(&self) -> f64 {
        l2_distance(&self.removed_loss, &self.redistribution_gain)
    }
}

pub fn decompose_two_part(
    q: &[f64],
    cache: &KvCache,
    params: &HeadParams,
    n: usize,
) -> Result<TwoPartDecomposition> {
    check_removal(cache, n)?;
    let logits = attention_logits(q, cache)?;
    let (amps, _) = amplifiers_from_logits(&logits);
    let ratio = amps[n];
    let own = vec_mat(cache.values().row(n), params.w_o())?;
    let out = mha_output(q, cache, params)?;
    Ok(TwoPartDecomposition {
        removed_loss: own.scale(ratio),
        redistribution_gain: out.scale(ratio),
    })
}

/// Output error of keeping exactly `kept` (row indices) for one query.
pub fn subset_error(q: &[f64], cache: &KvCache, params: &HeadParams, kept: &[usize]) -> Result<f64> {
    let full = mha_output(q, cache, params)?;
    let reduced = mha_output(q, &cache.retain_rows(kept)?, params)?;
    Ok(l2_distance(&full, &reduced))
}

/// Greedy top-`budget` selection by the indicator versus the exhaustive best
/// subset of the same size. Returns `(greedy_error, optimal_error)`.
///
/// Exponential in the cache length; meant for caches of a dozen rows or fewer.
pub fn greedy_vs_exhaustive(
    q: &[f64],
    cache: &KvCache,
    params: &HeadParams,
    budget: usize,
) -> Result<(f64, f64)> {
    let n = cache.len();
    if n > 16 {
        return Err(Error::domain("exhaustive search limited to 16 rows"));
    }
    if budget == 0 || budget >= n {
        return Ok((0.0, 0.0));
    }
    let scores: Vec<f64> = (0..n)
        .map(|m| closed_form_indicator(q, cache, params, m))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut greedy: Vec<usize> = order[..budget].to_vec();
    greedy.sort_unstable();
    let greedy_err = subset_error(q, cache, params, &greedy)?;

    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != budget {
            continue;
        }
        let kept: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        best = best.min(subset_error(q, cache, params, &kept)?);
    }
    Ok((greedy_err, best))
}

/// Softmax over the logits with entry `n` deleted; the reference route for
/// [`renormalized_weights`].
pub fn softmax_without(logits: &[f64], n: usize) -> Result<RealVector> {
    if n >= logits.len() {
        return Err(Error::domain("index out of range"));
    }
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != n)
        .map(|(_, l)| *l)
        .collect();
    stable_softmax(&rest)
}
