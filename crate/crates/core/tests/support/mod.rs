//! Strategies and checks shared by the property suite and the acceptance
//! run.
#![allow(dead_code)]

use std::collections::VecDeque;

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

use vsense::model::{
    FieldKind, FieldSchema, ParamMap, ParamValue, ProcessorSpec, SourceSpec, StreamElement, Value,
    VirtualSensorConfig,
};
use vsense::node::config::{AggregatorConfig, LoadMode};
use vsense::node::{NodeConfig, QueryJob, QueryQueue};
use vsense::sources::{PluginRegistry, SourceContext};
use vsense::storage::WindowStore;
use vsense::wire::frame::{
    DeliveryMode, PeerRegistration, QueryKind, QueryRequest, QueryResult, SensorInfo, StatusReport,
    SubscribeRequest, Subscription,
};
use vsense::wire::{Frame, Message};

pub fn ident() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,11}"
}

pub fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

pub fn value() -> impl Strategy<Value = Value> {
    prop_oneof![finite().prop_map(Value::Number), ".{0,8}".prop_map(Value::Text)]
}

pub fn element() -> impl Strategy<Value = StreamElement> {
    (ident(), any::<u64>(), any::<u64>(), vec(value(), 0..5)).prop_map(|(sensor, seq, timestamp, values)| StreamElement {
        sensor,
        seq,
        timestamp,
        values,
    })
}

pub fn field() -> impl Strategy<Value = FieldSchema> {
    (ident(), any::<bool>(), "[a-zA-Z/%0-9]{0,4}").prop_map(|(name, numeric, unit)| FieldSchema {
        name,
        kind: if numeric { FieldKind::Numeric } else { FieldKind::Text },
        unit,
    })
}

pub fn mode() -> impl Strategy<Value = DeliveryMode> {
    prop_oneof![Just(DeliveryMode::Push), Just(DeliveryMode::PersistentStream)]
}

pub fn sensor_info() -> impl Strategy<Value = SensorInfo> {
    (ident(), vec(field(), 1..4), 1..10_000u64, 10..60_000u64).prop_map(|(name, output_schema, history_size, sampling_interval)| {
        SensorInfo {
            name,
            output_schema,
            history_size,
            sampling_interval,
        }
    })
}

pub fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        "[0-9]{1,2}".prop_map(|version| Message::Hello { version }),
        (ident(), "[0-9.:]{3,21}", vec(sensor_info(), 0..4), any::<u64>()).prop_map(|(node_id, address, sensors, registered_at)| {
            Message::Register(PeerRegistration {
                node_id,
                address,
                sensors,
                registered_at,
            })
        }),
        (ident(), any::<u64>()).prop_map(|(node_id, sensors)| Message::RegisterAck { node_id, sensors }),
        Just(Message::ListSensors),
        vec(sensor_info(), 0..4).prop_map(|sensors| Message::SensorList { sensors }),
        (ident(), 1..1000usize).prop_map(|(sensor, n)| Message::Query(QueryRequest {
            sensor,
            kind: QueryKind::LatestN { n },
        })),
        (ident(), any::<u64>(), any::<u64>()).prop_map(|(sensor, from, to)| Message::Query(QueryRequest {
            sensor,
            kind: QueryKind::Range { from, to },
        })),
        (ident(), ident(), vec(element(), 0..4), any::<u64>()).prop_map(|(job, sensor, elements, processing_us)| {
            Message::QueryResult(QueryResult {
                job,
                sensor,
                elements,
                processing_us,
            })
        }),
        (ident(), ".{0,20}", mode(), any::<bool>()).prop_map(|(sensor, subscriber, mode, persistent_delivery)| {
            Message::Subscribe(SubscribeRequest {
                sensor,
                subscriber,
                mode,
                persistent_delivery,
            })
        }),
        (ident(), ident(), mode(), any::<bool>(), any::<u64>(), any::<Option<u64>>()).prop_map(
            |(id, sensor, mode, persistent_delivery, created_at, cursor)| {
                Message::SubscribeAck(Subscription {
                    id,
                    sensor,
                    subscriber: "127.0.0.1:9".into(),
                    mode,
                    persistent_delivery,
                    created_at,
                    cursor,
                })
            }
        ),
        (ident(), element()).prop_map(|(subscription, element)| Message::Deliver { subscription, element }),
        (ident(), any::<u64>()).prop_map(|(subscription, seq)| Message::DeliverAck { subscription, seq }),
        ("[A-Z_]{1,20}", ".{0,40}").prop_map(|(code, message)| Message::Error { code, message }),
        (ident(), any::<u64>(), any::<u64>(), "none|pending|registered").prop_map(|(node_id, uptime_ms, storage_bytes, registration)| {
            Message::Status(Box::new(StatusReport {
                node_id,
                uptime_ms,
                storage_bytes,
                registration,
                ..Default::default()
            }))
        }),
    ]
}

pub fn frame() -> impl Strategy<Value = Frame> {
    (".{0,16}", prop::option::of(1..u64::MAX), message()).prop_map(|(id, gap, message)| Frame { id, gap, message })
}

pub fn param_value() -> impl Strategy<Value = ParamValue> {
    prop_oneof![
        any::<bool>().prop_map(ParamValue::Bool),
        any::<i64>().prop_map(ParamValue::Int),
        finite().prop_map(ParamValue::Float),
        ".{0,12}".prop_map(ParamValue::Text),
    ]
}

pub fn params() -> impl Strategy<Value = ParamMap> {
    btree_map(ident(), param_value(), 0..4).prop_map(|m| m.into_iter().collect())
}

pub fn sensor_config() -> impl Strategy<Value = VirtualSensorConfig> {
    (
        ident(),
        1..100_000u64,
        10..3_600_000u64,
        (ident(), params()),
        vec((ident(), params()), 0..3),
        vec(field(), 1..4),
    )
        .prop_map(|(name, history_size, sampling_interval, (plugin, p), procs, output_schema)| VirtualSensorConfig {
            name,
            history_size,
            sampling_interval,
            source: SourceSpec { plugin, params: p },
            processors: procs
                .into_iter()
                .map(|(name, params)| ProcessorSpec { name, params })
                .collect(),
            output_schema,
        })
}

pub fn node_config() -> impl Strategy<Value = NodeConfig> {
    (
        ident(),
        prop::option::of("[0-9.]{7,15}:[0-9]{1,5}"),
        vec(sensor_config(), 0..4),
        vec((ident(), mode(), any::<bool>()), 0..3),
        prop::option::of((1..100usize, 1..10usize, 10..1000u64, prop::option::of(1.0..1000.0f64))),
        1..10_000usize,
    )
        .prop_map(|(id, coordinator, sensors, subs, agg, queue_bound)| {
            let mut cfg = NodeConfig::new(id);
            cfg.coordinator = coordinator;
            cfg.sensors = sensors;
            cfg.queue_bound = queue_bound;
            cfg.subscriptions = subs
                .into_iter()
                .map(|(sensor, mode, persistent_delivery)| SubscribeRequest {
                    sensor,
                    subscriber: "127.0.0.1:9100".into(),
                    mode,
                    persistent_delivery,
                })
                .collect();
            cfg.aggregator = agg.map(|(requests_per_client, expected_clients, duration_s, throttle)| AggregatorConfig {
                mode: LoadMode::PersistentStream,
                requests_per_client,
                expected_clients,
                duration_s,
                interval_ms: 1000,
                event_log: "events.csv".into(),
                throttle_ops_per_s: throttle,
            });
            cfg
        })
}

pub fn check_frame(f: Frame) -> Result<(), TestCaseError> {
    let line = f.encode();
    prop_assert!(!line.contains('\n'));
    prop_assert_eq!(Frame::decode(&line).unwrap(), f);
    Ok(())
}

pub fn check_config(cfg: NodeConfig) -> Result<(), TestCaseError> {
    let text = cfg.encode().unwrap();
    prop_assert_eq!(NodeConfig::parse(&text).unwrap(), cfg);
    Ok(())
}

/// Jobs are answered in the order they were queued, and each reply goes
/// back to its own requester.
pub fn check_fifo(sensors: Vec<String>) -> Result<(), TestCaseError> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let (queue, drain) = QueryQueue::new(64);
        let mut replies = Vec::new();
        for (i, sensor) in sensors.iter().enumerate() {
            let job = QueryJob {
                id: format!("job-{i}"),
                request: QueryRequest {
                    sensor: sensor.clone(),
                    kind: QueryKind::LatestN { n: 1 },
                },
                enqueued_at: i as u64,
                requester: "p".into(),
            };
            replies.push(queue.try_enqueue(job).unwrap());
        }
        drop(queue);
        let mut order = Vec::new();
        drain
            .run(async |job: QueryJob| {
                order.push(job.id.clone());
                Frame::new(job.id, Message::ListSensors)
            })
            .await;
        let expected: Vec<String> = (0..sensors.len()).map(|i| format!("job-{i}")).collect();
        prop_assert_eq!(order, expected);
        for (i, rx) in replies.into_iter().enumerate() {
            prop_assert_eq!(rx.await.unwrap().id, format!("job-{i}"));
        }
        Ok(())
    })
}

pub fn seeded_case() -> impl Strategy<Value = (i64, f64, usize, bool)> {
    (any::<i64>(), 0.001..10.0f64, 1..50usize, any::<bool>())
}

/// Two instances with the same seed read on different clocks give the
/// same values.
pub fn check_seeded((seed, step, reads, walk): (i64, f64, usize, bool)) -> Result<(), TestCaseError> {
    let registry = PluginRegistry::builtin();
    let (plugin, knob) = if walk { ("random_walk", "step") } else { ("multi_axis", "noise") };
    let p: ParamMap = [
        ("seed".to_string(), ParamValue::Int(seed)),
        (knob.to_string(), ParamValue::Float(step)),
    ]
    .into_iter()
    .collect();
    let ctx = SourceContext::new(".");
    let mut a = registry.instantiate_by_name(plugin, &p, &ctx).unwrap();
    let mut b = registry.instantiate_by_name(plugin, &p, &ctx).unwrap();
    for k in 0..reads as u64 {
        prop_assert_eq!(a.sample(k * 1000).unwrap(), b.sample(k * 7 + 3).unwrap());
    }
    Ok(())
}

/// What happens after each insert.
#[derive(Debug, Clone)]
pub enum After {
    Nothing,
    Resize(usize),
    Latest(usize),
}

pub fn after() -> impl Strategy<Value = After> {
    prop_oneof![
        90 => Just(After::Nothing),
        2 => (1..200usize).prop_map(After::Resize),
        8 => (0..250usize).prop_map(After::Latest),
    ]
}

pub const WINDOW_STEPS: usize = 10_000;

pub fn window_case() -> impl Strategy<Value = (usize, Vec<After>)> {
    (1..200usize, vec(after(), WINDOW_STEPS))
}

/// One insert per step, checked against a plain bounded queue.
pub fn check_window((capacity, steps): (usize, Vec<After>)) -> Result<(), TestCaseError> {
    let mut store = WindowStore::new("w", capacity).unwrap();
    let mut naive: VecDeque<StreamElement> = VecDeque::new();
    let mut cap = capacity;
    for (next, step) in steps.into_iter().enumerate() {
        let next = next as u64;
        let e = StreamElement {
            sensor: "w".into(),
            seq: next,
            timestamp: next * 10,
            values: vec![Value::Number(next as f64)],
        };
        naive.push_back(e.clone());
        if naive.len() > cap {
            naive.pop_front();
        }
        store.insert(e).unwrap();
        match step {
            After::Nothing => {}
            After::Resize(c) => {
                cap = c;
                while naive.len() > cap {
                    naive.pop_front();
                }
                store.set_capacity(c).unwrap();
            }
            After::Latest(n) => {
                let want: Vec<StreamElement> = naive.iter().rev().take(n).cloned().collect();
                prop_assert_eq!(store.query_latest(n), want);
            }
        }
        prop_assert!(store.len() <= cap);
        prop_assert_eq!(store.len(), naive.len());
        prop_assert_eq!(store.total_inserted(), next + 1);
    }
    let bytes: u64 = naive.iter().map(|e| e.wire_size() as u64).sum();
    prop_assert_eq!(store.bytes_estimate(), bytes);
    Ok(())
}
