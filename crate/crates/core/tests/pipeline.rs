use kvrecon::harness::pipeline::{check_feasible, run_with_reference};
use kvrecon::harness::{generate_trace, run_pipeline, Distribution, Reference, Trace, TraceDims};
use kvrecon::policies::{make_budget_plan, BudgetPlan, PlanKind, Policy, PolicyKind};
use kvrecon::smoothing::SmoothingConfig;
use kvrecon::Error;

fn trace(seed: u64, prompt_len: usize, decode_len: usize) -> Trace {
    let dims = TraceDims {
        layers: 3,
        heads: 2,
        prompt_len,
        decode_len,
        d_model: 32,
        d_k: 8,
        d_v: 8,
    };
    generate_trace(seed, dims, Distribution::Gaussian).unwrap().trace
}

#[test]
fn kept_counts_and_peak_entries_follow_the_plan() {
    let t = trace(1, 200, 12);
    let cfg = SmoothingConfig::default();
    let reference = Reference::compute(&t, &cfg).unwrap();
    for plan_kind in [PlanKind::Uniform, PlanKind::Pyramid] {
        let plan = make_budget_plan(plan_kind, 3, 64, cfg.window).unwrap();
        for kind in PolicyKind::ALL {
            let outcomes = run_with_reference(&t, &reference, &Policy::new(kind), &plan, &cfg).unwrap();
            assert_eq!(outcomes.len(), 6);
            for o in &outcomes {
                let budget = plan.per_layer[o.row.layer];
                assert_eq!(o.row.budget, budget);
                assert_eq!(o.row.kept, budget.min(200), "{kind} layer {}", o.row.layer);
                assert_eq!(o.row.peak_entries, o.row.kept + 12);
                assert_eq!(o.row.step_errors.len(), 12);
            }
            let total: usize = outcomes.iter().map(|o| o.row.kept).sum();
            assert_eq!(total, 2 * plan.total());
        }
    }
}

#[test]
fn decode_never_sees_an_evicted_position() {
    let t = trace(2, 160, 8);
    let cfg = SmoothingConfig::default();
    let reference = Reference::compute(&t, &cfg).unwrap();
    let plan = make_budget_plan(PlanKind::Uniform, 3, 48, cfg.window).unwrap();
    for kind in PolicyKind::ALL {
        for o in run_with_reference(&t, &reference, &Policy::new(kind), &plan, &cfg).unwrap() {
            let (prompt, decoded) = o.final_positions.split_at(o.decision.kept.len());
            // Compaction keeps absolute positions: prompt rows are exactly the
            // kept indices, then the decode tokens in order.
            assert_eq!(prompt, o.decision.kept.as_slice());
            assert_eq!(decoded, (160..168).collect::<Vec<_>>().as_slice());
        }
    }
}

#[test]
fn infeasible_budget_is_rejected_up_front() {
    let t = trace(3, 100, 4);
    let cfg = SmoothingConfig::default();
    let plan = BudgetPlan {
        per_layer: vec![64, 16, 64],
    };
    let err = check_feasible(&t, &Policy::new(PolicyKind::RestKv), &plan, &cfg).unwrap_err();
    assert!(matches!(err, Error::BudgetTooSmall { budget: 16, minimum: 32 }), "{err}");
    assert!(run_pipeline(&t, &Policy::new(PolicyKind::SnapAttn), &plan, &cfg).is_err());
    // Streaming only needs its sink plus one recent token.
    assert!(check_feasible(&t, &Policy::new(PolicyKind::Streaming), &plan, &cfg).is_ok());
    let wrong_layers = BudgetPlan { per_layer: vec![64; 2] };
    assert!(run_pipeline(&t, &Policy::new(PolicyKind::RestKv), &wrong_layers, &cfg).is_err());
}

#[test]
fn full_budget_is_bitwise_exact() {
    let t = trace(4, 90, 10);
    let cfg = SmoothingConfig::default();
    let plan = make_budget_plan(PlanKind::Uniform, 3, 90, cfg.window).unwrap();
    for kind in PolicyKind::ALL {
        let report = run_pipeline(&t, &Policy::new(kind), &plan, &cfg).unwrap();
        assert!(report.rows.iter().all(|r| r.max_err == 0.0 && r.mean_err == 0.0));
    }
}

#[test]
fn random_is_worse_than_rest_kv_on_average() {
    let cfg = SmoothingConfig::default();
    let plan = make_budget_plan(PlanKind::Uniform, 3, 48, cfg.window).unwrap();
    let (mut rest, mut random) = (0.0, 0.0);
    for seed in 0..100 {
        let t = trace(500 + seed, 128, 8);
        let reference = Reference::compute(&t, &cfg).unwrap();
        let mean = |kind| {
            let policy = Policy { seed, ..Policy::new(kind) };
            let rows = run_with_reference(&t, &reference, &policy, &plan, &cfg).unwrap();
            rows.iter().map(|o| o.row.mean_err).sum::<f64>() / rows.len() as f64
        };
        rest += mean(PolicyKind::RestKv);
        random += mean(PolicyKind::Random);
    }
    assert!(random >= rest, "random {random} vs rest_kv {rest}");
}

#[test]
fn runs_are_deterministic() {
    let t = trace(5, 120, 6);
    let cfg = SmoothingConfig::default();
    let plan = make_budget_plan(PlanKind::Pyramid, 3, 40, cfg.window).unwrap();
    for kind in PolicyKind::ALL {
        let a = run_pipeline(&t, &Policy::new(kind), &plan, &cfg).unwrap();
        let b = run_pipeline(&t, &Policy::new(kind), &plan, &cfg).unwrap();
        let strip = |r: &kvrecon::harness::RunReport| {
            r.rows.iter().map(|r| (r.layer, r.head, r.kept, r.mean_err.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }
}
