use std::sync::Arc;
use std::time::{Duration, Instant};

use edgetwin_core::WallClock;
use edgetwin_messaging::{Broker, Bus};
use edgetwin_runtime::offload::matmul::{blocked_matmul_graph, naive_matmul, product_from_results, result_checksum};
use edgetwin_runtime::offload::{
    Agent, AgentInfo, ExecError, ExecMode, GraphError, TaskGraph, TaskInput, TaskRegistry, TaskSpec, TaskValue,
};
use serde_json::{json, Value};

fn registry() -> Arc<TaskRegistry> {
    let mut r = TaskRegistry::with_builtins();
    r.register(
        "add",
        Arc::new(|inputs: &[Arc<TaskValue>]| {
            let s: f64 = inputs.iter().filter_map(|v| v.as_json()?.as_f64()).sum();
            Ok(TaskValue::Json(json!(s)))
        }),
    );
    r.register(
        "sleep",
        Arc::new(|_: &[Arc<TaskValue>]| {
            std::thread::sleep(Duration::from_millis(50));
            Ok(TaskValue::Json(Value::Null))
        }),
    );
    r.register("fail", Arc::new(|_: &[Arc<TaskValue>]| Err("nope".to_string())));
    Arc::new(r)
}

fn local(slots: usize) -> Agent {
    Agent::new("edge", slots, registry(), None, Arc::new(WallClock)).unwrap()
}

/// Edge and cloud agents on one in-process broker.
fn pair(edge_slots: usize, cloud_slots: usize) -> (Agent, Agent) {
    let bus: Arc<dyn Bus> = Arc::new(Broker::new());
    let edge = Agent::new("edge", edge_slots, registry(), Some(bus.clone()), Arc::new(WallClock)).unwrap();
    let cloud = Agent::new("cloud", cloud_slots, registry(), Some(bus), Arc::new(WallClock)).unwrap();
    cloud.advertise().unwrap();
    assert!(edge.wait_for_peer("cloud", Duration::from_secs(5)));
    (edge, cloud)
}

fn num(v: f64) -> TaskInput {
    TaskInput::literal(TaskValue::Json(json!(v)))
}

#[test]
fn single_task_matches_direct_call() {
    let agent = local(1);
    let mut g = TaskGraph::new();
    g.add(TaskSpec::new("only", "add", vec![num(2.0), num(3.5)]));
    for mode in ExecMode::ALL {
        let r = agent.run(&g, mode).unwrap();
        assert_eq!(r.results["only"].as_json(), Some(&json!(5.5)));
    }
}

#[test]
fn diamond_sees_both_branches() {
    let (edge, _cloud) = pair(1, 4);
    let mut g = TaskGraph::new();
    g.add(TaskSpec::new("A", "add", vec![num(1.0)]))
        .add(TaskSpec::new("B", "add", vec![TaskInput::Output("A".into()), num(10.0)]))
        .add(TaskSpec::new("C", "add", vec![TaskInput::Output("A".into()), num(100.0)]))
        .add(TaskSpec::new("D", "add", vec![TaskInput::Output("B".into()), TaskInput::Output("C".into())]));
    for mode in ExecMode::ALL {
        let r = edge.run(&g, mode).unwrap();
        assert_eq!(r.results["D"].as_json(), Some(&json!(112.0)), "{mode}");
    }
}

#[test]
fn graph_validation() {
    let agent = local(1);
    let mut cyc = TaskGraph::new();
    cyc.add(TaskSpec::new("a", "add", vec![TaskInput::Output("b".into())]))
        .add(TaskSpec::new("b", "add", vec![TaskInput::Output("a".into())]));
    assert!(matches!(agent.run(&cyc, ExecMode::Sequential), Err(ExecError::Graph(GraphError::Cycle(_)))));

    let mut dup = TaskGraph::new();
    dup.add(TaskSpec::new("a", "add", vec![])).add(TaskSpec::new("a", "add", vec![]));
    assert!(matches!(agent.run(&dup, ExecMode::Sequential), Err(ExecError::Graph(GraphError::DuplicateId(_)))));

    let mut unknown = TaskGraph::new();
    unknown.add(TaskSpec::new("a", "mystery", vec![]));
    assert!(matches!(agent.run(&unknown, ExecMode::Sequential), Err(ExecError::UnknownKind { .. })));
}

#[test]
fn failure_reports_partial_results() {
    let agent = local(1);
    let mut g = TaskGraph::new();
    g.add(TaskSpec::new("ok", "add", vec![num(1.0)]))
        .add(TaskSpec::new("bad", "fail", vec![TaskInput::Output("ok".into())]));
    match agent.run(&g, ExecMode::Sequential) {
        Err(ExecError::TaskFailed { task, partial, .. }) => {
            assert_eq!(task, "bad");
            assert!(partial.contains_key("ok"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn vanished_peer_fails_the_graph() {
    let (edge, cloud) = pair(1, 4);
    drop(cloud);
    // the cloud's subscriptions close within one listener poll
    std::thread::sleep(Duration::from_millis(300));
    edge.set_peer_timeout(Duration::from_secs(2));
    let w = blocked_matmul_graph(2, 2, 1);
    let _slot = edge.reserve(1);
    assert!(matches!(edge.run(&w.graph, ExecMode::Offload), Err(ExecError::PeerUnreachable { .. })));
}

#[test]
fn matmul_matches_naive_oracle() {
    let w = blocked_matmul_graph(2, 3, 42);
    assert_eq!(w.graph.len(), 5);
    let agent = local(2);
    let r = agent.run(&w.graph, ExecMode::LocalParallel).unwrap();
    let c = product_from_results(&r.results, 2).unwrap();
    assert_eq!(c, naive_matmul(&w.a, &w.b));

    let one = blocked_matmul_graph(1, 5, 7);
    assert_eq!(one.graph.len(), 2);
    let r = agent.run(&one.graph, ExecMode::Sequential).unwrap();
    assert_eq!(product_from_results(&r.results, 1).unwrap(), naive_matmul(&one.a, &one.b));
}

#[test]
fn modes_agree_bit_for_bit() {
    let (edge, _cloud) = pair(2, 4);
    for (m, b) in [(1, 1), (2, 2), (3, 5), (4, 16)] {
        let w = blocked_matmul_graph(m, b, 9);
        let sums: Vec<String> = ExecMode::ALL
            .iter()
            .map(|&mode| {
                let _slot = (mode == ExecMode::Offload).then(|| edge.reserve(2));
                let r = edge.run(&w.graph, mode).unwrap();
                if mode == ExecMode::Offload {
                    assert_eq!(r.placement.count_on("cloud"), m * m + 1);
                }
                result_checksum(&r.results).unwrap()
            })
            .collect();
        assert!(sums.windows(2).all(|p| p[0] == p[1]), "m={m} b={b}");
        let oracle = naive_matmul(&w.a, &w.b);
        assert_eq!(sums[0], edgetwin_runtime::offload::matmul::checksum(&oracle));
    }
}

#[test]
fn local_parallel_work_conservation() {
    // sleeping tasks do not need a CPU each, so this holds on any host
    let agent = local(4);
    let mut g = TaskGraph::new();
    for i in 0..8 {
        g.add(TaskSpec::new(format!("t{i}"), "sleep", vec![]));
    }
    let start = Instant::now();
    agent.run(&g, ExecMode::LocalParallel).unwrap();
    let makespan = start.elapsed();
    assert!(makespan <= Duration::from_millis(50 * 2 * 125 / 100), "{makespan:?}");
}

#[test]
fn plan_safety_under_execution() {
    let (edge, cloud) = pair(1, 4);
    let mut g = TaskGraph::new();
    for i in 0..12 {
        g.add(TaskSpec::new(format!("t{i}"), "sleep", vec![]));
    }
    let r = edge.run(&g, ExecMode::Offload).unwrap();
    assert_eq!(r.placement.count_on("edge") + r.placement.count_on("cloud"), 12);
    assert!(r.placement.limits["cloud"] <= cloud.total_slots());
    assert_eq!(edge.info(), AgentInfo::new("edge", 1, 1));
}
