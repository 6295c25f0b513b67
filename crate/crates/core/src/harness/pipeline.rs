//! Prefill, evict once, then decode without further eviction, and measure how
//! far each head's outputs drift from the full-cache run.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trace::Trace;
use crate::attention::{HeadInstance, KvCache};
use crate::error::{Error, Result};
use crate::numerics::{l2_distance, RealVector};
use crate::policies::{BudgetPlan, Policy, PolicyKind};
use crate::smoothing::{EvictionDecision, SmoothingConfig};

/// One (policy, layer, head) line of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: PolicyKind,
    pub layer: usize,
    pub head: usize,
    pub budget: usize,
    pub mean_err: f64,
    pub max_err: f64,
    pub kept: usize,
    pub peak_entries: usize,
    pub score_ms: f64,
    /// Per decode step; JSON only.
    #[serde(default)]
    pub step_errors: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    /// Mean of `mean_err` over the rows of one policy.
    pub fn mean_error(&self, policy: PolicyKind) -> Option<f64> {
        let errs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.policy == policy)
            .map(|r| r.mean_err)
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }

    /// Orders rows by (policy, budget, layer, head).
    pub fn sort(&mut self) {
        self.rows
            .sort_by_key(|r| (r.policy, r.budget, r.layer, r.head));
    }

    pub fn merge(&mut self, other: RunReport) {
        self.rows.extend(other.rows);
        self.sort();
    }
}

/// Everything the pipeline learned about one head.
#[derive(Debug, Clone)]
pub struct HeadOutcome {
    pub decision: EvictionDecision,
    pub row: ReportRow,
    /// Absolute positions held by the compacted cache after decoding.
    pub final_positions: Vec<usize>,
}

/// Full-cache decode outputs for every head, reused across policies.
#[derive(Debug, Clone)]
pub struct Reference {
    heads: Vec<(HeadInstance, Vec<RealVector>)>,
}

impl Reference {
    pub fn compute(trace: &Trace, cfg: &SmoothingConfig) -> Result<Self> {
        cfg.validate()?;
        let d = trace.dims();
        let pairs: Vec<(usize, usize)> = (0..d.layers)
            .flat_map(|l| (0..d.heads).map(move |h| (l, h)))
            .collect();
        let heads = pairs
            .par_iter()
            .map(|&(l, h)| {
                let inst = HeadInstance::prefill(trace.head(l, h).clone(), trace.prompt(), cfg.window)?;
                let outputs = decode_all(&inst.cache, &inst, trace)?;
                Ok((inst, outputs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    fn head(&self, index: usize) -> &(HeadInstance, Vec<RealVector>) {
        &self.heads[index]
    }
}

fn decode_all(cache: &KvCache, inst: &HeadInstance, trace: &Trace) -> Result<Vec<RealVector>> {
    let mut head = HeadInstance::new(inst.params.clone(), cache.clone(), inst.queries().clone())?;
    trace
        .decode()
        .row_iter()
        .map(|x| head.decode_step(x))
        .collect()
}

fn decode_compacted(
    inst: &HeadInstance,
    kept: &[usize],
    trace: &Trace,
) -> Result<(Vec<RealVector>, Vec<usize>)> {
    let compacted = inst.cache.retain_rows(kept)?;
    let mut head = HeadInstance::new(inst.params.clone(), compacted, inst.queries().clone())?;
    let outputs = trace
        .decode()
        .row_iter()
        .map(|x| head.decode_step(x))
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, head.cache.positions().to_vec()))
}

/// Fails before any computation if some layer's budget cannot be honoured.
pub fn check_feasible(trace: &Trace, policy: &Policy, plan: &BudgetPlan, cfg: &SmoothingConfig) -> Result<()> {
    cfg.validate()?;
    policy.validate()?;
    if plan.layers() != trace.dims().layers {
        return Err(Error::domain(format!(
            "budget plan has {} layers, trace has {}",
            plan.layers(),
            trace.dims().layers
        )));
    }
    let minimum = policy.min_budget(trace.dims().prompt_len, cfg.window);
    if let Some(&budget) = plan.per_layer.iter().find(|&&b| b < minimum) {
        return Err(Error::BudgetTooSmall { budget, minimum });
    }
    Ok(())
}

/// Runs one policy under one plan, reusing a precomputed full-cache reference.
pub fn run_with_reference(
    trace: &Trace,
    reference: &Reference,
    policy: &Policy,
    plan: &BudgetPlan,
    cfg: &SmoothingConfig,
) -> Result<Vec<HeadOutcome>> {
    check_feasible(trace, policy, plan, cfg)?;
    let heads = trace.dims().heads;
    (0..reference.heads.len())
        .into_par_iter()
        .map(|i| {
            let (layer, head) = (i / heads, i % heads);
            let (inst, full) = reference.head(i);
            let budget = plan.per_layer[layer];
            let started = Instant::now();
            let decision = policy.decide(inst, budget, cfg, layer, head)?;
            let score_ms = started.elapsed().as_secs_f64() * 1e3;
            let (outputs, final_positions) = decode_compacted(inst, &decision.kept, trace)?;
            let step_errors: Vec<f64> = full
                .iter()
                .zip(&outputs)
                .map(|(a, b)| l2_distance(a, b))
                .collect();
            let (mean_err, max_err) = if step_errors.is_empty() {
                (0.0, 0.0)
            } else {
                (
                    step_errors.iter().sum::<f64>() / step_errors.len() as f64,
                    step_errors.iter().copied().fold(0.0, f64::max),
                )
            };
            let row = ReportRow {
                policy: policy.kind,
                layer,
                head,
                budget,
                mean_err,
                max_err,
                kept: decision.kept.len(),
                peak_entries: final_positions.len(),
                score_ms,
                step_errors,
            };
            Ok(HeadOutcome {
                decision,
                row,
                final_positions,
            })
        })
        .collect()
}

pub fn run_pipeline(trace: &Trace, policy: &Policy, plan: &BudgetPlan, cfg: &SmoothingConfig) -> Result<RunReport> {
    check_feasible(trace, policy, plan, cfg)?;
    let reference = Reference::compute(trace, cfg)?;
    let outcomes = run_with_reference(trace, &reference, policy, plan, cfg)?;
    let mut report = RunReport {
        rows: outcomes.into_iter().map(|o| o.row).collect(),
    };
    report.sort();
    Ok(report)
}

/// Every (policy, plan) cell over one trace, sharing the full-cache reference.
pub fn run_grid(
    trace: &Trace,
    policies: &[Policy],
    plans: &[BudgetPlan],
    cfg: &SmoothingConfig,
) -> Result<RunReport> {
    for p in policies {
        for plan in plans {
            check_feasible(trace, p, plan, cfg)?;
        }
    }
    let reference = Reference::compute(trace, cfg)?;
    let mut report = RunReport::default();
    for p in policies {
        for plan in plans {
            let outcomes = run_with_reference(trace, &reference, p, plan, cfg)?;
            report.rows.extend(outcomes.into_iter().map(|o| o.row));
        }
    }
    report.sort();
    Ok(report)
}
