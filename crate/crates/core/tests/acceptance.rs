//! Acceptance gate: one pass/fail line per criterion, then a single assert.
//!
//! Every criterion runs even when an earlier one fails, so the printed
//! summary is always complete. Run with `--nocapture` to see it.

use std::io::Cursor;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kvrecon::attention::{attention_logits, attention_weights, HeadInstance};
use kvrecon::harness::oracle::{check_equivalence, random_instance};
use kvrecon::harness::{
    generate_trace, parse_trace, read_report_csv, run_grid, write_report_csv, write_trace,
    Distribution, Reference, TraceDims,
};
use kvrecon::harness::pipeline::run_with_reference;
use kvrecon::indicator::{closed_form_indicator, removal_oracle, renormalized_weights, softmax_without};
use kvrecon::policies::{make_budget_plan, PlanKind, Policy, PolicyKind};
use kvrecon::smoothing::{ema, select_top_b, SmoothedScores, SmoothingConfig, SpatialParams};

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        passed,
        detail,
    }
}

fn closed_form_equivalence() -> Outcome {
    let start = Instant::now();
    let s = check_equivalence(200, 64, 1e-8, 20_240_601).expect("equivalence run");
    let elapsed = start.elapsed();
    let passed = s.passed() && s.trials == 200 && elapsed < Duration::from_secs(10);
    outcome(
        1,
        "closed form equals brute-force removal",
        passed,
        format!(
            "{} instances, {} comparisons, worst {:.2e}, {} failures, {} skipped, {:.2?}",
            s.trials, s.comparisons, s.worst, s.failures, s.skipped, elapsed
        ),
    )
}

fn renormalization_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 64).unwrap();
        let logits = attention_logits(&inst.query, &inst.cache).unwrap();
        let weights = attention_weights(&inst.query, &inst.cache).unwrap();
        let n = rng.random_range(0..inst.cache.len());
        let renorm = renormalized_weights(&weights, n).unwrap();
        let direct = softmax_without(&logits, n).unwrap();
        assert_eq!(renorm.weights().len(), direct.len());
        for (a, b) in renorm.weights().iter().zip(direct.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        2,
        "renormalized weights equal softmax over the subset",
        worst <= 1e-12,
        format!("1000 rows, worst deviation {worst:.2e}"),
    )
}

fn argmin_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut agree = 0;
    let mut exact = 0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 64).unwrap();
        let n = inst.cache.len();
        let brute: Vec<f64> = (0..n)
            .map(|i| removal_oracle(&inst.query, &inst.cache, &inst.params, i).unwrap())
            .collect();
        let closed: Vec<f64> = (0..n)
            .map(|i| closed_form_indicator(&inst.query, &inst.cache, &inst.params, i).unwrap())
            .collect();
        let argmin = |xs: &[f64]| (0..xs.len()).min_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap();
        let (c, b) = (argmin(&closed), argmin(&brute));
        if c == b {
            exact += 1;
        }
        if c == b || (brute[c] - brute[b]).abs() <= 1e-9 {
            agree += 1;
        }
    }
    outcome(
        3,
        "least-important key is the least-damaging removal",
        agree == 100,
        format!("{agree}/100 agree ({exact} identical indices)"),
    )
}

fn ema_suite() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let c: f64 = rng.random_range(0.0..10.0);
        let alpha: f64 = rng.random_range(0.01..1.0);
        let len = rng.random_range(1..64);
        if ema(&vec![c; len], alpha).unwrap() != c {
            problems.push(format!("constant {c} not fixed at alpha {alpha}"));
        }
        let series: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..5.0)).collect();
        if ema(&series, 1.0).unwrap() != *series.last().unwrap() {
            problems.push("alpha = 1 is not the newest value".into());
        }
        // Unrolled closed form: a(1-a)^(T-1-t) weights, the oldest element
        // carrying the remaining (1-a)^(T-1).
        let t = series.len();
        let mut unrolled = (1.0 - alpha).powi(t as i32 - 1) * series[0];
        for (i, x) in series.iter().enumerate().skip(1) {
            unrolled += alpha * (1.0 - alpha).powi((t - 1 - i) as i32) * x;
        }
        let got = ema(&series, alpha).unwrap();
        if (got - unrolled).abs() > 1e-12 * unrolled.abs().max(1.0) {
            problems.push(format!("recursion {got} vs unrolled {unrolled}"));
        }
    }
    let detail = if problems.is_empty() {
        "100 constant, degenerate and random series".to_string()
    } else {
        format!("{} problems, first: {}", problems.len(), problems[0])
    };
    outcome(4, "EMA fixed point, alpha = 1, unrolled recursion", problems.is_empty(), detail)
}

fn window_table() -> Outcome {
    let cases = [(0.0, (1, 1)), (2500.0, (3, 1)), (-2500.0, (3, -1))];
    let mut got = Vec::new();
    let mut passed = true;
    for (drift, want) in cases {
        let p = SpatialParams::from_centroids(1000.0 + drift, 1000.0, 2000.0);
        got.push((p.width, p.shift));
        passed &= (p.width, p.shift) == want;
    }
    outcome(5, "adaptive window width and shift table", passed, format!("{got:?}"))
}

fn selection_contracts() -> Outcome {
    let window = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut problems = Vec::new();
    for _ in 0..100 {
        let scored = rng.random_range(1..200);
        let n = scored + window;
        let raw: Vec<f64> = (0..scored).map(|_| rng.random_range(0.0..1.0)).collect();
        let scores = SmoothedScores::with_pinned_tail(raw.clone(), window).unwrap();
        let c = rng.random_range(0.01..100.0);
        let scaled = SmoothedScores::with_pinned_tail(raw.iter().map(|x| x * c).collect(), window).unwrap();

        let mut prev: Option<Vec<usize>> = None;
        for b in window..=n + 8 {
            let kept = select_top_b(&scores, b).unwrap().kept;
            if kept.len() != b.min(n) {
                problems.push(format!("|kept| {} for B {b}, N {n}", kept.len()));
            }
            if !(n - window..n).all(|p| kept.binary_search(&p).is_ok()) {
                problems.push(format!("window not pinned at B {b}"));
            }
            if let Some(p) = &prev {
                if !p.iter().all(|i| kept.binary_search(i).is_ok()) {
                    problems.push(format!("kept({}) not a subset of kept({b})", b - 1));
                }
            }
            if select_top_b(&scaled, b).unwrap().kept != kept {
                problems.push(format!("scaling by {c} changed the kept set at B {b}"));
            }
            prev = Some(kept);
        }
    }
    let detail = if problems.is_empty() {
        "100 score vectors, every budget from S_w to N + 8".to_string()
    } else {
        format!("{} problems, first: {}", problems.len(), problems[0])
    };
    outcome(6, "pinning, size, nesting and scale invariance", problems.is_empty(), detail)
}

fn dims(prompt_len: usize, decode_len: usize) -> TraceDims {
    TraceDims {
        layers: 2,
        heads: 2,
        prompt_len,
        decode_len,
        d_model: 64,
        d_k: 16,
        d_v: 16,
    }
}

fn end_to_end_dominance() -> Outcome {
    let start = Instant::now();
    let cfg = SmoothingConfig::default();
    let policies: Vec<Policy> = [PolicyKind::RestKv, PolicyKind::SnapAttn, PolicyKind::Random]
        .into_iter()
        .map(|k| Policy {
            seed: 99,
            ..Policy::new(k)
        })
        .collect();
    let plans: Vec<_> = [48, 64, 96]
        .into_iter()
        .map(|n| make_budget_plan(PlanKind::Uniform, 2, n, cfg.window).unwrap())
        .collect();
    let traces = 100;
    let (mut rest_sum, mut snap_sum) = (0.0, 0.0);
    let (mut rest_wins, mut rest_over_random, mut snap_over_random) = (0, 0, 0);
    for seed in 0..traces {
        let trace = generate_trace(seed, dims(256, 32), Distribution::Gaussian).unwrap().trace;
        let report = run_grid(&trace, &policies, &plans, &cfg).unwrap();
        let rest = report.mean_error(PolicyKind::RestKv).unwrap();
        let snap = report.mean_error(PolicyKind::SnapAttn).unwrap();
        let random = report.mean_error(PolicyKind::Random).unwrap();
        rest_sum += rest;
        snap_sum += snap;
        rest_wins += (rest < snap) as usize;
        rest_over_random += (rest < random) as usize;
        snap_over_random += (snap < random) as usize;
    }
    let elapsed = start.elapsed();
    let (rest_mean, snap_mean) = (rest_sum / traces as f64, snap_sum / traces as f64);
    let need = |count: usize, frac: f64| count as f64 >= frac * traces as f64;
    let passed = rest_mean < snap_mean
        && need(rest_wins, 0.60)
        && need(rest_over_random, 0.95)
        && need(snap_over_random, 0.95)
        && elapsed < Duration::from_secs(120);
    outcome(
        7,
        "rest_kv beats snap_attn; both beat random",
        passed,
        format!(
            "mean err rest_kv {rest_mean:.4e} vs snap_attn {snap_mean:.4e}; rest_kv wins {rest_wins}/100; \
             over random: rest_kv {rest_over_random}/100, snap_attn {snap_over_random}/100; {elapsed:.2?}"
        ),
    )
}

fn needle_retention() -> Outcome {
    let cfg = SmoothingConfig::default();
    let policy = Policy::new(PolicyKind::RestKv);
    let (mut planted, mut retained) = (0usize, 0usize);
    for seed in 0..50 {
        let synth = generate_trace(1000 + seed, dims(512, 0), Distribution::Clustered).unwrap();
        let t = &synth.trace;
        for layer in 0..t.dims().layers {
            for head in 0..t.dims().heads {
                let inst = HeadInstance::prefill(t.head(layer, head).clone(), t.prompt(), cfg.window).unwrap();
                let kept = policy.decide(&inst, 64, &cfg, layer, head).unwrap().kept;
                planted += synth.planted.len();
                retained += synth
                    .planted
                    .iter()
                    .filter(|p| kept.binary_search(p).is_ok())
                    .count();
            }
        }
    }
    let frac = retained as f64 / planted.max(1) as f64;
    outcome(
        8,
        "rest_kv keeps planted needles at budget 64",
        planted > 0 && frac >= 0.90,
        format!("{retained}/{planted} planted tokens kept ({:.1}%)", 100.0 * frac),
    )
}

fn zero_eviction() -> Outcome {
    let cfg = SmoothingConfig::default();
    let trace = generate_trace(5, dims(128, 16), Distribution::Gaussian).unwrap().trace;
    let reference = Reference::compute(&trace, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for kind in PolicyKind::ALL {
        for n in [128, 129, 400] {
            let plan = make_budget_plan(PlanKind::Uniform, 2, n, cfg.window).unwrap();
            for o in run_with_reference(&trace, &reference, &Policy::new(kind), &plan, &cfg).unwrap() {
                rows += 1;
                worst = o.row.step_errors.iter().fold(worst, |w, &e| w.max(e));
            }
        }
    }
    outcome(
        9,
        "budget >= prompt length reproduces full-cache decode",
        worst == 0.0,
        format!("{rows} head runs over all policies, largest step error {worst:e}"),
    )
}

fn round_trip_and_cli() -> Outcome {
    let mut problems = Vec::new();
    let trace = generate_trace(3, dims(96, 8), Distribution::Clustered).unwrap().trace;
    let mut first = Vec::new();
    write_trace(&trace, &mut first).unwrap();
    let mut second = Vec::new();
    write_trace(&parse_trace(&first).unwrap(), &mut second).unwrap();
    if first != second {
        problems.push("trace rewrite differs".to_string());
    }

    let cfg = SmoothingConfig::default();
    let policies: Vec<Policy> = PolicyKind::ALL.into_iter().map(Policy::new).collect();
    let plans = vec![make_budget_plan(PlanKind::Pyramid, 2, 48, cfg.window).unwrap()];
    let report = run_grid(&trace, &policies, &plans, &cfg).unwrap();
    let mut csv1 = Vec::new();
    write_report_csv(&report, &mut csv1).unwrap();
    let mut csv2 = Vec::new();
    write_report_csv(&read_report_csv(Cursor::new(&csv1)).unwrap(), &mut csv2).unwrap();
    if csv1 != csv2 {
        problems.push("report rewrite differs".to_string());
    }

    let status = Command::new(env!("CARGO_BIN_EXE_kvrecon"))
        .arg("oracle-check")
        .output()
        .expect("spawn kvrecon");
    if !status.status.success() {
        problems.push(format!("oracle-check exited with {}", status.status));
    }
    let detail = if problems.is_empty() {
        format!("{} trace bytes, {} report bytes identical; oracle-check exit 0", first.len(), csv1.len())
    } else {
        problems.join("; ")
    };
    outcome(10, "trace/report round trip and oracle-check", problems.is_empty(), detail)
}

#[test]
fn acceptance() {
    let checks: [fn() -> Outcome; 10] = [
        closed_form_equivalence,
        renormalization_identity,
        argmin_agreement,
        ema_suite,
        window_table,
        selection_contracts,
        end_to_end_dominance,
        needle_retention,
        zero_eviction,
        round_trip_and_cli,
    ];
    let results: Vec<Outcome> = checks.iter().map(|f| f()).collect();
    for r in &results {
        println!(
            "[{}] criterion {:>2}: {} -- {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.detail
        );
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
