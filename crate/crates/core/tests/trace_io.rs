use std::io::Cursor;

use kvrecon::harness::trace::HEADER_LEN;
use kvrecon::harness::{
    generate_trace, parse_trace, read_report_csv, read_report_json, read_trace, run_grid, write_report_csv,
    write_report_json, write_trace, Distribution, Trace, TraceDims,
};
use kvrecon::policies::{make_budget_plan, PlanKind, Policy, PolicyKind};
use kvrecon::smoothing::SmoothingConfig;
use kvrecon::Error;

fn dims() -> TraceDims {
    TraceDims {
        layers: 2,
        heads: 3,
        prompt_len: 70,
        decode_len: 5,
        d_model: 12,
        d_k: 4,
        d_v: 6,
    }
}

fn bytes(t: &Trace) -> Vec<u8> {
    let mut out = Vec::new();
    write_trace(t, &mut out).unwrap();
    out
}

fn offset_of(err: Error) -> u64 {
    match err {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn same_seed_same_bytes() {
    for dist in [Distribution::Gaussian, Distribution::Clustered] {
        let a = bytes(&generate_trace(9, dims(), dist).unwrap().trace);
        let b = bytes(&generate_trace(9, dims(), dist).unwrap().trace);
        let c = bytes(&generate_trace(10, dims(), dist).unwrap().trace);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn rewrite_is_byte_identical_and_values_survive() {
    let t = generate_trace(4, dims(), Distribution::Clustered).unwrap().trace;
    let first = bytes(&t);
    let back = read_trace(Cursor::new(&first)).unwrap();
    assert_eq!(bytes(&back), first);
    assert_eq!(back.dims(), t.dims());
    assert_eq!(back.prompt(), t.prompt());
    assert_eq!(back.decode(), t.decode());
    assert_eq!(back.head(1, 2), t.head(1, 2));
    let floats = 2 * 3 * (12 * 4 * 2 + 12 * 6 + 6 * 12) + 75 * 12;
    assert_eq!(first.len(), HEADER_LEN + 4 * floats);
}

#[test]
fn corrupt_files_report_offsets() {
    let good = bytes(&generate_trace(1, dims(), Distribution::Gaussian).unwrap().trace);

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(offset_of(parse_trace(&bad).unwrap_err()), 0);

    let mut bad = good.clone();
    bad[4] = 7;
    assert_eq!(offset_of(parse_trace(&bad).unwrap_err()), 4);

    // Zero heads: the second dimension field.
    let mut bad = good.clone();
    bad[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(offset_of(parse_trace(&bad).unwrap_err()), 12);

    let cut = good.len() - 3;
    assert_eq!(offset_of(parse_trace(&good[..cut]).unwrap_err()), cut as u64);
    assert_eq!(offset_of(parse_trace(&good[..10]).unwrap_err()), 10);

    let mut long = good.clone();
    long.extend_from_slice(&[0; 4]);
    assert_eq!(offset_of(parse_trace(&long).unwrap_err()), good.len() as u64);

    let mut nan = good.clone();
    let at = HEADER_LEN + 8;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(offset_of(parse_trace(&nan).unwrap_err()), at as u64);
}

#[test]
fn reports_round_trip_through_csv_and_json() {
    let t = generate_trace(2, dims(), Distribution::Gaussian).unwrap().trace;
    let cfg = SmoothingConfig::default();
    let policies: Vec<Policy> = PolicyKind::ALL.into_iter().map(Policy::new).collect();
    let plans = vec![
        make_budget_plan(PlanKind::Uniform, 2, 40, cfg.window).unwrap(),
        make_budget_plan(PlanKind::Pyramid, 2, 40, cfg.window).unwrap(),
    ];
    let report = run_grid(&t, &policies, &plans, &cfg).unwrap();

    let mut csv = Vec::new();
    write_report_csv(&report, &mut csv).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "policy,layer,head,budget,mean_err,max_err,kept,peak_entries,score_ms"
    );
    let back = read_report_csv(Cursor::new(&csv)).unwrap();
    for (a, b) in report.rows.iter().zip(&back.rows) {
        assert_eq!(a.mean_err.to_bits(), b.mean_err.to_bits());
        assert_eq!(a.max_err.to_bits(), b.max_err.to_bits());
        assert_eq!((a.policy, a.layer, a.head, a.budget, a.kept), (b.policy, b.layer, b.head, b.budget, b.kept));
    }

    let mut json = Vec::new();
    write_report_json(&report, &mut json).unwrap();
    assert_eq!(read_report_json(Cursor::new(&json)).unwrap(), report);
}

#[test]
fn csv_with_wrong_header_is_rejected() {
    let text = "policy,layer,head\nrest_kv,0,0\n";
    assert!(read_report_csv(Cursor::new(text)).is_err());
}
