//! Seeded synthetic traces.
//!
//! Token embeddings mix a component shared by the whole sequence, per-token
//! noise, and an exponentially distributed "salience" along the direction
//! every head's queries favour. The shared part makes queries at different
//! positions agree on which keys matter; the salience gives attention the
//! heavy tail it has in trained models, where a few keys take most of the
//! mass. Embeddings are rescaled so every entry has variance close to 1.
//! Head weights are Gaussian with variance `1 / fan_in`, the query projection
//! additionally scaled by [`QUERY_GAIN`].
//!
//! The clustered distribution also plants a few "needle" tokens pushed far
//! along the favoured direction: high attention, values far from the mean.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::trace::{Trace, TraceDims};
use crate::attention::HeadParams;
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, vec_mat, RealMatrix};

/// Fraction of embedding variance carried by the shared component.
pub const SHARED_FRACTION: f64 = 0.5;
/// Needle displacement, in units of a typical embedding norm.
pub const NEEDLE_SCALE: f64 = 4.0;
/// Multiplier on the query projection's standard deviation; sharpens attention.
pub const QUERY_GAIN: f64 = 2.0;
/// Scale of the exponential per-token salience along the favoured direction.
pub const SALIENCE_SCALE: f64 = 4.0;
/// One needle per this many prompt tokens.
pub const TOKENS_PER_NEEDLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Gaussian,
    Clustered,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Gaussian => "gaussian",
            Distribution::Clustered => "clustered",
        })
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(Distribution::Gaussian),
            "clustered" => Ok(Distribution::Clustered),
            other => Err(Error::domain(format!("unknown distribution '{other}'"))),
        }
    }
}

/// A generated trace and the prompt positions of its planted needles
/// (empty for gaussian traces).
#[derive(Debug, Clone)]
pub struct SyntheticTrace {
    pub trace: Trace,
    pub planted: Vec<usize>,
}

struct Sampler(ChaCha8Rng);

impl Sampler {
    // Rounded through f32 so the in-memory trace equals its on-disk form.
    fn normal(&mut self, scale: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.0);
        (z * scale) as f32 as f64
    }

    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Result<RealMatrix> {
        let data = (0..rows * cols).map(|_| self.normal(scale)).collect();
        RealMatrix::new(rows, cols, data)
    }
}

pub fn generate_trace(seed: u64, dims: TraceDims, dist: Distribution) -> Result<SyntheticTrace> {
    dims.validate()?;
    let mut s = Sampler(ChaCha8Rng::seed_from_u64(seed));
    let d = dims.d_model;

    let mut heads = Vec::with_capacity(dims.layers * dims.heads);
    for _ in 0..dims.layers * dims.heads {
        let in_scale = 1.0 / (d as f64).sqrt();
        heads.push(HeadParams::new(
            s.matrix(d, dims.d_k, QUERY_GAIN * in_scale)?,
            s.matrix(d, dims.d_k, in_scale)?,
            s.matrix(d, dims.d_v, in_scale)?,
            s.matrix(dims.d_v, d, 1.0 / (dims.d_v as f64).sqrt())?,
        )?);
    }

    let shared: Vec<f64> = (0..d).map(|_| s.normal(1.0)).collect();

    // Direction maximizing the summed key alignment with the shared query:
    // sum over heads of W_K (shared W_Q)^T, normalized.
    let mut dir = vec![0.0; d];
    for h in &heads {
        let q = vec_mat(&shared, h.w_q())?;
        for (i, di) in dir.iter_mut().enumerate() {
            *di += h.w_k().row(i).iter().zip(q.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    let norm = l2_norm(&dir).max(f64::MIN_POSITIVE);
    dir.iter_mut().for_each(|x| *x /= norm);

    // Salience m ~ SALIENCE_SCALE * Exp(1) has E[m^2] = 2 SALIENCE_SCALE^2,
    // spread over d entries; `shrink` brings the entry variance back to 1.
    let shrink = 1.0 / (1.0 + 2.0 * SALIENCE_SCALE * SALIENCE_SCALE / d as f64).sqrt();
    let (a, b) = (SHARED_FRACTION.sqrt(), (1.0 - SHARED_FRACTION).sqrt());
    let token = |s: &mut Sampler| -> Vec<f64> {
        let e: f64 = Exp1.sample(&mut s.0);
        let m = SALIENCE_SCALE * e;
        shared
            .iter()
            .zip(&dir)
            .map(|(c, di)| {
                let z: f64 = StandardNormal.sample(&mut s.0);
                (shrink * (a * c + b * z + m * di)) as f32 as f64
            })
            .collect()
    };
    let mut prompt: Vec<Vec<f64>> = (0..dims.prompt_len).map(|_| token(&mut s)).collect();
    let decode: Vec<Vec<f64>> = (0..dims.decode_len).map(|_| token(&mut s)).collect();

    let mut planted = Vec::new();
    if dist == Distribution::Clustered {
        // Needles live in the older three quarters of the prompt.
        let region = dims.prompt_len - dims.prompt_len / 4;
        let count = (dims.prompt_len / TOKENS_PER_NEEDLE).clamp(1, region.max(1));
        planted = sample(&mut s.0, region, count.min(region)).into_vec();
        planted.sort_unstable();
        let scale = NEEDLE_SCALE * (d as f64).sqrt();
        for &p in &planted {
            for (x, di) in prompt[p].iter_mut().zip(&dir) {
                *x = (*x + scale * di) as f32 as f64;
            }
        }
    }

    let prompt = RealMatrix::from_rows(&prompt)?;
    let decode = if decode.is_empty() {
        RealMatrix::empty(d)
    } else {
        RealMatrix::from_rows(&decode)?
    };
    Ok(SyntheticTrace {
        trace: Trace::new(dims, heads, prompt, decode)?,
        planted,
    })
}
