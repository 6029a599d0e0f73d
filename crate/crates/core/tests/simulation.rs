use servesim::cluster::{simulate, ClusterSpec, SimError};
use servesim::dsched::{Heatmap, HeatmapAxes, Policy, RpsGrid};
use servesim::metrics::{read_csv, RequestStatus};
use servesim::workload::{
    generate_trace, DecodeDist, LengthDist, PrefixGroup, Request, WorkloadSpec,
};

fn flat_heatmap(v: f64) -> Heatmap {
    let axes = HeatmapAxes::default();
    let cells = vec![vec![v; axes.cols()]; axes.rows()];
    Heatmap {
        axes,
        per_rps: vec![RpsGrid {
            rps: 1.0,
            cells: cells.clone(),
        }],
        combined: cells,
    }
}

fn mixed(n: u32, rps: f64, seed: u64) -> Vec<Request> {
    let spec = WorkloadSpec {
        prompt_len: LengthDist::Uniform {
            min: 100,
            max: 3000,
        },
        decode_len: DecodeDist::RatioBand {
            min_ratio: 0.01,
            max_ratio: 0.2,
        },
        ..WorkloadSpec::fixed_lengths(rps, n, 1, 1, seed)
    };
    generate_trace(&spec).unwrap()
}

fn shared_prefix(n: u32, rps: f64, groups: u32, tagged: bool) -> Vec<Request> {
    let spec = WorkloadSpec {
        prompt_len: LengthDist::Uniform {
            min: 900,
            max: 1200,
        },
        decode_len: DecodeDist::Constant { tokens: 32 },
        prefix_groups: (0..groups)
            .map(|_| PrefixGroup {
                prefix_len: 768,
                share: 1.0 / groups as f64,
            })
            .collect(),
        tag_context_ids: tagged,
        ..WorkloadSpec::fixed_lengths(rps, n, 1, 1, 11)
    };
    generate_trace(&spec).unwrap()
}

fn combined(colocated: u32, pairs: u32, hm: f64) -> ClusterSpec {
    ClusterSpec {
        heatmap: Some(flat_heatmap(hm)),
        ..ClusterSpec::layout(colocated, pairs)
    }
}

fn csv_bytes(out: &servesim::cluster::RunOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    out.metrics.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn reruns_are_identical() {
    let trace = mixed(120, 3.0, 5);
    let a = simulate(combined(2, 1, 0.3), trace.clone()).unwrap();
    let b = simulate(combined(2, 1, 0.3), trace).unwrap();
    assert_eq!(csv_bytes(&a), csv_bytes(&b));
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

#[test]
fn every_request_is_accounted_for() {
    let trace = mixed(200, 6.0, 1);
    let full = simulate(combined(2, 1, 0.3), trace.clone()).unwrap();
    let s = &full.report.summary;
    assert_eq!(s.completed, 200);
    assert_eq!(s.in_flight + s.queued + s.rejected, 0);

    let cut = simulate(
        ClusterSpec {
            horizon_us: Some(10_000_000),
            ..combined(2, 1, 0.3)
        },
        trace,
    )
    .unwrap();
    let s = &cut.report.summary;
    assert!(s.completed < 200 && s.completed > 0);
    assert_eq!(
        s.completed + s.in_flight + s.queued + s.rejected,
        s.requests
    );
    assert_eq!(s.requests, 200);
}

#[test]
fn summary_matches_recomputation_from_csv() {
    let out = simulate(combined(2, 1, -0.1), mixed(150, 4.0, 8)).unwrap();
    let rows = read_csv(csv_bytes(&out).as_slice()).unwrap();
    let mut jct: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.jct_us)
        .map(|v| v as f64)
        .collect();
    let s = &out.report.summary;
    assert_eq!(rows.len(), s.requests);
    assert_eq!(jct.len(), s.completed);
    let mean = jct.iter().sum::<f64>() / jct.len() as f64;
    assert!((mean - s.jct_us.mean).abs() <= 1e-9 * mean);
    jct.sort_by(f64::total_cmp);
    // Nearest rank: ceil(p * n) as a one-based index.
    let p90 = jct[(0.9 * jct.len() as f64).ceil() as usize - 1];
    assert_eq!(p90, s.jct_us.p90);
    let hits: u64 = rows.iter().map(|r| r.cached_prefix_tokens as u64).sum();
    assert_eq!(hits, s.cache_hit_tokens);
    for r in &rows {
        let (ttft, jct) = (r.ttft_us.unwrap(), r.jct_us.unwrap());
        assert!(ttft <= jct, "{}", r.request_id);
    }
}

#[test]
fn heatmap_sign_steers_unit_kind() {
    let trace = mixed(60, 1.0, 2);
    let short = trace.iter().filter(|r| r.prompt_len() < 512).count() as u64;
    assert!(short > 0);
    let to_pair = simulate(combined(2, 1, 1.0), trace.clone()).unwrap();
    assert_eq!(to_pair.report.routed_colocated, 0);
    // Prompts below the first heatmap row are out of range and go to the pair.
    let to_coloc = simulate(combined(2, 1, -1.0), trace).unwrap();
    assert_eq!(to_coloc.report.routed_disaggregated, short);
    assert_eq!(to_coloc.report.handoffs, short);
}

#[test]
fn locality_routing_reuses_more_prefix_than_load_only() {
    let trace = shared_prefix(240, 6.0, 16, false);
    let hits = |spec: ClusterSpec| {
        simulate(spec, trace.clone())
            .unwrap()
            .report
            .summary
            .cache_hit_tokens
    };
    let with = |policy| ClusterSpec {
        policy,
        ..ClusterSpec::layout(4, 0)
    };
    let local = hits(with(Policy::LocalityOnly));
    let load = hits(with(Policy::LoadOnly));
    // Locality pays about one miss per group (more while a first prefill is
    // still running); load-only pays up to one per group and engine.
    assert!(local >= (240 - 2 * 16) * 768, "locality {local}");
    assert!(load < local, "load-only {load} vs locality {local}");
}

#[test]
fn context_tagged_workload_completes() {
    let trace = shared_prefix(120, 4.0, 4, true);
    let out = simulate(
        ClusterSpec {
            policy: Policy::LocalityOnly,
            ..ClusterSpec::layout(2, 0)
        },
        trace,
    )
    .unwrap();
    assert_eq!(out.report.summary.completed, 120);
    assert!(out.report.summary.cache_hit_tokens > 0);
}

#[test]
fn failed_unit_rejects_its_requests_only() {
    let trace = mixed(200, 8.0, 4);
    let out = simulate(
        ClusterSpec {
            policy: Policy::RoundRobin,
            failures: vec![(5_000_000, 0)],
            ..ClusterSpec::layout(2, 1)
        },
        trace,
    )
    .unwrap();
    let s = &out.report.summary;
    assert!(s.rejected > 0);
    assert_eq!(s.completed + s.rejected, 200);
    for r in &out.metrics.records {
        if r.status == RequestStatus::Completed && r.arrival_us > 5_000_000 {
            assert_ne!(
                r.te_id,
                Some(0),
                "{} served by the failed engine",
                r.request_id
            );
        }
    }
}

#[test]
fn empty_trace_gives_empty_summary() {
    let out = simulate(combined(2, 1, 0.0), Vec::new()).unwrap();
    assert_eq!(out.report.summary.requests, 0);
    assert_eq!(out.report.summary.jct_us.count, 0);
}

#[test]
fn heatmap_policy_without_heatmap_is_rejected() {
    let err = simulate(ClusterSpec::layout(2, 1), mixed(4, 1.0, 0)).unwrap_err();
    assert!(matches!(err, SimError::Config(_)), "{err}");
}
