//! Single-head attention over an explicit KV cache.
//!
//! A layer is a list of heads and a model is a list of layers; nothing here
//! models residuals or MLPs. Causality comes from construction order: a query
//! at absolute position `p` only sees cache rows whose position is `<= p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, stable_softmax, vec_mat, RealMatrix, RealVector};

/// Projection weights of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    w_q: RealMatrix,
    w_k: RealMatrix,
    w_v: RealMatrix,
    w_o: RealMatrix,
}

impl HeadParams {
    /// `w_q`, `w_k`: d_model × d_k; `w_v`: d_model × d_v; `w_o`: d_v × d_out.
    pub fn new(w_q: RealMatrix, w_k: RealMatrix, w_v: RealMatrix, w_o: RealMatrix) -> Result<Self> {
        let d_model = w_q.rows();
        if w_k.rows() != d_model || w_v.rows() != d_model {
            return Err(Error::domain(format!(
                "projection input dims disagree: W_Q {}, W_K {}, W_V {}",
                d_model,
                w_k.rows(),
                w_v.rows()
            )));
        }
        if w_q.cols() != w_k.cols() || w_q.cols() == 0 {
            return Err(Error::domain(format!(
                "W_Q has {} columns but W_K has {}",
                w_q.cols(),
                w_k.cols()
            )));
        }
        if w_v.cols() != w_o.rows() || w_v.cols() == 0 {
            return Err(Error::domain(format!(
                "W_V has {} columns but W_O has {} rows",
                w_v.cols(),
                w_o.rows()
            )));
        }
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_o.cols()
    }

    pub fn w_q(&self) -> &RealMatrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &RealMatrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &RealMatrix {
        &self.w_v
    }

    pub fn w_o(&self) -> &RealMatrix {
        &self.w_o
    }
}

/// Append-only key/value store for one head.
///
/// `positions` records the absolute token position of each row so that a
/// compacted cache can be audited against the eviction decision.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: RealMatrix,
    values: RealMatrix,
    positions: Vec<usize>,
    next_position: usize,
}

impl KvCache {
    pub fn new(d_k: usize, d_v: usize) -> Self {
        Self {
            keys: RealMatrix::empty(d_k),
            values: RealMatrix::empty(d_v),
            positions: Vec::new(),
            next_position: 0,
        }
    }

    /// Cache holding rows at positions `0..N`.
    pub fn from_parts(keys: RealMatrix, values: RealMatrix) -> Result<Self> {
        if keys.rows() != values.rows() {
            return Err(Error::domain(format!(
                "{} keys but {} values",
                keys.rows(),
                values.rows()
            )));
        }
        let n = keys.rows();
        Ok(Self {
            keys,
            values,
            positions: (0..n).collect(),
            next_position: n,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &RealMatrix {
        &self.keys
    }

    pub fn values(&self) -> &RealMatrix {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn d_k(&self) -> usize {
        self.keys.cols()
    }

    pub fn d_v(&self) -> usize {
        self.values.cols()
    }

    /// Appends one KV pair at the next absolute position.
    pub fn append(&mut self, k: &[f64], v: &[f64]) -> Result<()> {
        if k.len() != self.d_k() || v.len() != self.d_v() {
            return Err(Error::domain(format!(
                "cannot append key/value of dims {}/{} to cache of dims {}/{}",
                k.len(),
                v.len(),
                self.d_k(),
                self.d_v()
            )));
        }
        self.keys.push_row(k)?;
        self.values.push_row(v)?;
        self.positions.push(self.next_position);
        self.next_position += 1;
        Ok(())
    }

    /// Compacted copy holding only `rows` (indices into this cache, ascending).
    /// Future appends continue from this cache's next position.
    pub fn retain_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("retained rows must be strictly increasing"));
        }
        Ok(Self {
            keys: self.keys.select_rows(rows)?,
            values: self.values.select_rows(rows)?,
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            next_position: self.next_position,
        })
    }

    pub fn without_row(&self, row: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&r| r != row).collect();
        if keep.len() == self.len() {
            return Err(Error::domain(format!(
                "row {row} out of range for cache of length {}",
                self.len()
            )));
        }
        self.retain_rows(&keep)
    }

    /// Rows visible to a query at absolute position `position`.
    pub fn visible_len(&self, position: usize) -> usize {
        self.positions.partition_point(|&p| p <= position)
    }

    pub fn prefix(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            keys: self.keys.prefix_rows(len),
            values: self.values.prefix_rows(len),
            positions: self.positions[..len].to_vec(),
            next_position: self.positions.get(len).copied().unwrap_or(self.next_position),
        }
    }
}

/// Softmax attention weights of one query over a cache.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow(RealVector);

impl AttentionRow {
    /// Wraps weights that must be non-negative and sum to one (within 1e-10).
    pub fn new(weights: RealVector) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::domain("attention row must be non-empty"));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::domain("attention weights must lie in [0, 1]"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::domain(format!("attention weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One head together with its cache and a window of queries.
#[derive(Debug, Clone)]
pub struct HeadInstance {
    pub params: HeadParams,
    pub cache: KvCache,
    queries: RealMatrix,
    query_positions: Vec<usize>,
}

impl HeadInstance {
    /// Every query sees the whole cache.
    pub fn new(params: HeadParams, cache: KvCache, queries: RealMatrix) -> Result<Self> {
        let last = cache.positions().last().copied().unwrap_or(0);
        let positions = vec![last; queries.rows()];
        Self::with_positions(params, cache, queries, positions)
    }

    /// Query row `i` sits at absolute position `positions[i]` and only sees
    /// cache rows at or before it.
    pub fn with_positions(
        params: HeadParams,
        cache: KvCache,
        queries: RealMatrix,
        positions: Vec<usize>,
    ) -> Result<Self> {
        if queries.cols() != params.d_k() {
            return Err(Error::domain(format!(
                "query dim {} does not match d_k {}",
                queries.cols(),
                params.d_k()
            )));
        }
        if cache.d_k() != params.d_k() || cache.d_v() != params.d_v() {
            return Err(Error::domain("cache dims do not match head params"));
        }
        if positions.len() != queries.rows() {
            return Err(Error::domain(format!(
                "{} query positions for {} queries",
                positions.len(),
                queries.rows()
            )));
        }
        Ok(Self {
            params,
            cache,
            queries,
            query_positions: positions,
        })
    }

    /// Runs the prompt through the head: full cache plus the queries of the
    /// last `window` tokens at their causal positions.
    pub fn prefill(params: HeadParams, prompt: &RealMatrix, window: usize) -> Result<Self> {
        let keys = matmul(prompt, params.w_k())?;
        let values = matmul(prompt, params.w_v())?;
        let cache = KvCache::from_parts(keys, values)?;
        let n = prompt.rows();
        let start = n - window.min(n);
        let rows: Vec<usize> = (start..n).collect();
        let queries = matmul(&prompt.select_rows(&rows)?, params.w_q())?;
        Self::with_positions(params, cache, queries, rows)
    }

    pub fn queries(&self) -> &RealMatrix {
        &self.queries
    }

    pub fn query_positions(&self) -> &[usize] {
        &self.query_positions
    }

    /// The cache as seen by query row `i`.
    pub fn visible_cache(&self, i: usize) -> KvCache {
        self.cache.prefix(self.cache.visible_len(self.query_positions[i]))
    }

    /// Appends the token's KV pair and returns the head output for it.
    pub fn decode_step(&mut self, x_new: &[f64]) -> Result<RealVector> {
        let (q, k, v) = project_token(x_new, &self.params)?;
        self.cache.append(&k, &v)?;
        mha_output(&q, &self.cache, &self.params)
    }
}

pub fn project_token(x: &[f64], params: &HeadParams) -> Result<(RealVector, RealVector, RealVector)> {
    if x.len() != params.d_model() {
        return Err(Error::domain(format!(
            "token dim {} does not match d_model {}",
            x.len(),
            params.d_model()
        )));
    }
    Ok((
        vec_mat(x, params.w_q())?,
        vec_mat(x, params.w_k())?,
        vec_mat(x, params.w_v())?,
    ))
}

/// Scaled dot-product logits `q·K^T / sqrt(d_k)`.
pub fn attention_logits(q: &[f64], cache: &KvCache) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::domain("attention over an empty cache"));
    }
    if q.len() != cache.d_k() {
        return Err(Error::domain(format!(
            "query dim {} does not match key dim {}",
            q.len(),
            cache.d_k()
        )));
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    Ok(cache.keys().row_iter().map(|k| dot(q, k) * scale).collect())
}

pub fn attention_weights(q: &[f64], cache: &KvCache) -> Result<AttentionRow> {
    let logits = attention_logits(q, cache)?;
    Ok(AttentionRow(stable_softmax(&logits)?))
}

/// Head output `A·V·W_O` for one query.
pub fn mha_output(q: &[f64], cache: &KvCache, params: &HeadParams) -> Result<RealVector> {
    let a = attention_weights(q, cache)?;
    let z = vec_mat(a.weights(), cache.values())?;
    vec_mat(&z, params.w_o())
}
