use std::path::PathBuf;
use std::time::Duration;

use vsense::harness::outage::{run_outage, OutageSpec};
use vsense::harness::{self, oracle, report, RunOptions, TopologySpec};
use vsense::node::config::LoadMode;

fn opts(dir: &tempfile::TempDir) -> RunOptions {
    RunOptions {
        node_bin: Some(PathBuf::from(env!("CARGO_BIN_EXE_vsense-node"))),
        ..RunOptions::in_dir(dir.path())
    }
}

fn tiny(mode: LoadMode) -> TopologySpec {
    let mut spec = TopologySpec::new(1, mode, 1, 10);
    spec.sensors_per_client = 1;
    spec
}

#[tokio::test]
async fn single_stream_gets_the_whole_share() {
    let dir = tempfile::tempdir().unwrap();
    let r = harness::run_experiment(&tiny(LoadMode::Pull), &opts(&dir)).await.unwrap();
    assert!(r.complete, "{:?}", r.notes);
    assert_eq!(r.completion_shares.len(), 1);
    assert_eq!(r.completion_shares[0].share_pct, 100.0);
    assert!((10..=11).contains(&r.completions), "{}", r.completions);

    // harness and oracle agree on the persisted log
    let o = oracle::recompute_file(r.event_log.as_ref().unwrap()).unwrap();
    assert_eq!(o.avg_time_per_request_ms, Some(r.avg_time_per_request_ms.unwrap().round() as u64));
    assert_eq!(o.completions, vec![r.completions]);

    let out = dir.path().join("report");
    harness::emit_report(&r, &out).unwrap();
    let first: Vec<Vec<u8>> = ["samples.csv", "shares.csv", "storage.csv", "work.csv", "summary.txt"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    harness::emit_report(&r, &out).unwrap();
    for (i, f) in ["samples.csv", "shares.csv", "storage.csv", "work.csv", "summary.txt"].iter().enumerate() {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), first[i], "{f}");
    }
    let summary = String::from_utf8(first[4].clone()).unwrap();
    assert!(summary.contains("avg_time_per_request_ms = "));
    assert!(!r.storage_series.is_empty());
}

#[tokio::test]
async fn killed_clients_give_an_incomplete_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = opts(&dir);
    o.kill_clients = true;
    o.registration_timeout = Duration::from_secs(3);
    let r = harness::run_experiment(&tiny(LoadMode::Pull), &o).await.unwrap();
    assert!(!r.complete);
    assert_eq!(r.avg_time_per_request_ms, None);
    assert_eq!(r.completions, 0);
    // whether or not the clients registered before dying, nothing completed
    assert!(
        r.notes.iter().any(|n| n.contains("NO_COMPLETIONS") || n.contains("did not register")),
        "{:?}",
        r.notes
    );
    let text = report::summary_text(&r);
    assert!(text.contains("avg_time_per_request_ms = undefined"));
    assert!(text.contains("complete = false"));
}

#[tokio::test]
async fn missing_binary_is_a_spawn_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = opts(&dir);
    o.node_bin = Some(dir.path().join("no-such-binary"));
    let err = harness::run_experiment(&tiny(LoadMode::Pull), &o).await.unwrap_err();
    assert_eq!(err.code(), "SPAWN_FAILED");
}

#[tokio::test]
async fn invalid_spec_is_refused_before_spawning() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(LoadMode::Pull);
    spec.duration_s = 5;
    let err = harness::run_experiment(&spec, &opts(&dir)).await.unwrap_err();
    assert_eq!(err.code(), "SPEC_INVALID");
}

#[tokio::test]
async fn paired_modes_share_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = TopologySpec::new(1, LoadMode::Push, 3, 10);
    spec.sensors_per_client = 2;
    let pair = harness::compare_modes(&spec, &opts(&dir)).await.unwrap();
    assert!(pair.persistent.complete && pair.push.complete);
    assert!(pair.push.connections.push_connections > pair.persistent.connections.stream_connections);
    assert!(pair.persistent.connections.stream_connections <= pair.persistent.connections.subscriptions);
    let out = dir.path().join("out");
    harness::emit_paired(&pair, &out).unwrap();
    let header = |m: &str| {
        let text = std::fs::read_to_string(out.join(m).join("samples.csv")).unwrap();
        text.lines().next().unwrap().to_string()
    };
    assert_eq!(header("persistent_stream"), header("push"));
    assert!(out.join("comparison.csv").is_file());
}

#[tokio::test]
async fn short_outage_is_replayed_in_full() {
    let dir = tempfile::tempdir().unwrap();
    let spec = OutageSpec {
        sensors: 2,
        sampling_interval_ms: 200,
        history_size: 200,
        warmup_s: 2,
        outage_s: 4,
        recovery_timeout_s: 30,
        seed: 3,
    };
    let r = run_outage(&spec, &opts(&dir)).await.unwrap();
    assert!(r.notes.is_empty(), "{:?}", r.notes);
    assert!(r.windows_match(), "{:?}", r.mismatches);
    assert!(r.replay_ok(), "{:#?}", r.replays);
    assert!(r.replays.iter().all(|c| c.produced_during_outage.len() >= 15));
}
