use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, RecvTimeoutError, Sender};
use edgetwin_core::{Clock, Timestamp};
use edgetwin_messaging::{Bus, Frame, FrameType, KeyPattern, RoutingKey, Subscription};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{GraphError, ResultMap, TaskGraph, TaskInput, TaskValue};
use super::plan::{plan, AgentInfo, ExecMode, Placement, PlanError};
use super::pool::SlotPool;

pub type TaskFn = Arc<dyn Fn(&[Arc<TaskValue>]) -> Result<TaskValue, String> + Send + Sync>;

#[derive(Clone, Default)]
pub struct TaskRegistry {
    kinds: HashMap<String, TaskFn>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the blocked matrix-multiplication kinds.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        super::matmul::register(&mut r);
        r
    }

    pub fn register(&mut self, kind: impl Into<String>, f: TaskFn) {
        self.kinds.insert(kind.into(), f);
    }

    pub fn get(&self, kind: &str) -> Option<&TaskFn> {
        self.kinds.get(kind)
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.kinds.contains_key(kind)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("task {task:?} has unknown kind {kind:?}")]
    UnknownKind { task: String, kind: String },
    #[error("task {task:?} failed on {node}: {reason}")]
    TaskFailed {
        task: String,
        node: String,
        reason: String,
        partial: ResultMap,
    },
    #[error("peer {node} unreachable: {reason}")]
    PeerUnreachable {
        node: String,
        reason: String,
        partial: ResultMap,
    },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub results: ResultMap,
    pub placement: Placement,
    pub elapsed: Duration,
}

#[derive(Serialize, Deserialize)]
struct TaskEnvelope {
    run: String,
    task: String,
    kind: String,
    inputs: Vec<TaskValue>,
    reply_to: String,
}

#[derive(Serialize, Deserialize)]
struct ResultEnvelope {
    run: String,
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<TaskValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Completion {
    task: usize,
    result: Result<Arc<TaskValue>, String>,
}

/// Where a run's remote results go, and the graph index of each task id.
type PendingRun = (Sender<Completion>, HashMap<String, usize>);

struct Inner {
    node: String,
    registry: Arc<TaskRegistry>,
    pool: SlotPool,
    bus: Option<Arc<dyn Bus>>,
    clock: Arc<dyn Clock>,
    peers: RwLock<BTreeMap<String, AgentInfo>>,
    pending: Mutex<HashMap<String, PendingRun>>,
    reserved: AtomicUsize,
    next_run: AtomicU64,
    peer_timeout: RwLock<Duration>,
}

/// Per-node task executor. Runs graphs submitted locally, placing tasks on
/// its own slots or on peers, and serves tasks that peers send to it.
#[derive(Clone)]
pub struct Agent {
    inner: Arc<Inner>,
}

/// Keeps slots out of the advertised free count while held.
pub struct Reservation {
    inner: Arc<Inner>,
    n: usize,
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.inner.reserved.fetch_sub(self.n, Ordering::SeqCst);
    }
}

fn info_key(node: &str) -> RoutingKey {
    RoutingKey::new(["agent", node, "info"]).expect("valid node label")
}

fn listen(sub: Subscription, weak: Weak<Inner>, handle: fn(&Arc<Inner>, Frame)) {
    loop {
        match sub.recv_timeout(Duration::from_millis(100)) {
            Ok(f) => match weak.upgrade() {
                Some(inner) => handle(&inner, f),
                None => return,
            },
            Err(RecvTimeoutError::Timeout) => {
                if weak.strong_count() == 0 {
                    return;
                }
            }
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

impl Agent {
    /// Without a bus the agent can only run graphs locally.
    pub fn new(
        node: impl Into<String>,
        slots: usize,
        registry: Arc<TaskRegistry>,
        bus: Option<Arc<dyn Bus>>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, edgetwin_messaging::BusError> {
        let node = node.into();
        let inner = Arc::new(Inner {
            pool: SlotPool::new(&node, slots),
            node: node.clone(),
            registry,
            bus: bus.clone(),
            clock,
            peers: RwLock::new(BTreeMap::new()),
            pending: Mutex::new(HashMap::new()),
            reserved: AtomicUsize::new(0),
            next_run: AtomicU64::new(0),
            peer_timeout: RwLock::new(Duration::from_secs(60)),
        });
        if let Some(bus) = bus {
            let subs = [
                (RoutingKey::agent_tasks(&node)?, Self::on_task as fn(&Arc<Inner>, Frame)),
                (RoutingKey::agent_results(&node)?, Self::on_result),
            ];
            for (key, handler) in subs {
                let sub = bus.subscribe(KeyPattern::exact(&key))?;
                let weak = Arc::downgrade(&inner);
                thread::spawn(move || listen(sub, weak, handler));
            }
            let sub = bus.subscribe("agent.*.info".parse()?)?;
            let weak = Arc::downgrade(&inner);
            thread::spawn(move || listen(sub, weak, Self::on_info));
        }
        Ok(Self { inner })
    }

    pub fn node(&self) -> &str {
        &self.inner.node
    }

    pub fn total_slots(&self) -> usize {
        self.inner.pool.slots()
    }

    pub fn free_slots(&self) -> usize {
        let used = self.inner.pool.busy() + self.inner.reserved.load(Ordering::SeqCst);
        self.total_slots().saturating_sub(used)
    }

    pub fn info(&self) -> AgentInfo {
        AgentInfo::new(self.inner.node.clone(), self.total_slots(), self.free_slots())
    }

    pub fn reserve(&self, n: usize) -> Reservation {
        self.inner.reserved.fetch_add(n, Ordering::SeqCst);
        Reservation {
            inner: self.inner.clone(),
            n,
        }
    }

    pub fn set_peer_timeout(&self, t: Duration) {
        *self.inner.peer_timeout.write() = t;
    }

    pub fn add_peer(&self, info: AgentInfo) {
        if info.node != self.inner.node {
            self.inner.peers.write().insert(info.node.clone(), info);
        }
    }

    pub fn peers(&self) -> Vec<AgentInfo> {
        self.inner.peers.read().values().cloned().collect()
    }

    /// Publishes this agent's capacity on `agent.<node>.info`.
    pub fn advertise(&self) -> Result<(), edgetwin_messaging::BusError> {
        if let Some(bus) = &self.inner.bus {
            let f = Frame::with(info_key(&self.inner.node), self.inner.clock.now(), FrameType::Heartbeat, &self.info());
            bus.publish(f)?;
        }
        Ok(())
    }

    /// Waits until `node` has advertised itself.
    pub fn wait_for_peer(&self, node: &str, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.inner.peers.read().contains_key(node) {
                return true;
            }
            thread::sleep(Duration::from_millis(5));
        }
        false
    }

    fn on_info(inner: &Arc<Inner>, f: Frame) {
        if let Ok(info) = f.payload_as::<AgentInfo>() {
            if info.node != inner.node {
                inner.peers.write().insert(info.node.clone(), info);
            }
        }
    }

    fn on_task(inner: &Arc<Inner>, f: Frame) {
        let Ok(env) = f.payload_as::<TaskEnvelope>() else {
            log::warn!("{}: malformed task frame", inner.node);
            return;
        };
        let inner2 = inner.clone();
        inner.pool.execute(move || {
            let inputs: Vec<Arc<TaskValue>> = env.inputs.into_iter().map(Arc::new).collect();
            let result = match inner2.registry.get(&env.kind) {
                Some(f) => f(&inputs),
                None => Err(format!("unknown task kind {:?}", env.kind)),
            };
            let (output, error) = match result {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e)),
            };
            let reply = ResultEnvelope {
                run: env.run,
                task: env.task,
                output,
                error,
            };
            if let (Some(bus), Ok(key)) = (&inner2.bus, RoutingKey::agent_results(&env.reply_to)) {
                let frame = Frame::with(key, inner2.clock.now(), FrameType::TaskResult, &reply);
                if let Err(e) = bus.publish(frame) {
                    log::warn!("{}: cannot return task result: {e}", inner2.node);
                }
            }
        });
    }

    fn on_result(inner: &Arc<Inner>, f: Frame) {
        let Ok(env) = f.payload_as::<ResultEnvelope>() else { return };
        let pending = inner.pending.lock();
        let Some((tx, ids)) = pending.get(&env.run) else { return };
        let Some(&task) = ids.get(&env.task) else { return };
        let result = match (env.output, env.error) {
            (Some(v), _) => Ok(Arc::new(v)),
            (None, Some(e)) => Err(e),
            (None, None) => Err("empty result".into()),
        };
        let _ = tx.send(Completion { task, result });
    }

    /// Runs `graph` to completion on the calling thread.
    pub fn run(&self, graph: &TaskGraph, mode: ExecMode) -> Result<RunReport, ExecError> {
        let start = Instant::now();
        let (succ, mut indeg) = graph.structure()?;
        graph.topological_order()?;
        let peers = self.peers();
        let placement = plan(graph, &self.info(), &peers, mode)?;
        for t in &graph.tasks {
            if placement.nodes[&t.id] == self.inner.node && !self.inner.registry.contains(&t.kind) {
                return Err(ExecError::UnknownKind {
                    task: t.id.clone(),
                    kind: t.kind.clone(),
                });
            }
        }

        let run = format!("{}-{}", self.inner.node, self.inner.next_run.fetch_add(1, Ordering::Relaxed));
        let (tx, rx) = unbounded();
        let ids: HashMap<String, usize> = graph.tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        self.inner.pending.lock().insert(run.clone(), (tx.clone(), ids));
        let result = self.drive(graph, &placement, &run, &succ, &mut indeg, tx, rx);
        self.inner.pending.lock().remove(&run);
        result.map(|results| RunReport {
            results,
            placement,
            elapsed: start.elapsed(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn drive(
        &self,
        graph: &TaskGraph,
        placement: &Placement,
        run: &str,
        succ: &[Vec<usize>],
        indeg: &mut [usize],
        tx: Sender<Completion>,
        rx: crossbeam_channel::Receiver<Completion>,
    ) -> Result<ResultMap, ExecError> {
        let n = graph.tasks.len();
        let node_of: Vec<&str> = graph.tasks.iter().map(|t| placement.nodes[&t.id].as_str()).collect();
        let mut queues: BTreeMap<&str, VecDeque<usize>> = BTreeMap::new();
        let mut inflight: BTreeMap<&str, usize> = BTreeMap::new();
        let mut results: Vec<Option<Arc<TaskValue>>> = vec![None; n];
        for i in 0..n {
            if indeg[i] == 0 {
                queues.entry(node_of[i]).or_default().push_back(i);
            }
        }
        let timeout = *self.inner.peer_timeout.read();
        let partial = |results: &[Option<Arc<TaskValue>>]| -> ResultMap {
            results
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.clone().map(|v| (graph.tasks[i].id.clone(), v)))
                .collect()
        };
        let mut done = 0;
        while done < n {
            for (node, q) in queues.iter_mut() {
                let limit = placement.limits.get(*node).copied().unwrap_or(1);
                let used = inflight.entry(node).or_insert(0);
                while let Some(&i) = q.front() {
                    let cores = graph.tasks[i].cores;
                    if *used > 0 && *used + cores > limit {
                        break;
                    }
                    q.pop_front();
                    *used += cores;
                    let inputs = self.resolve(graph, i, &results);
                    if let Err(reason) = self.dispatch(graph, i, node, inputs, run, &tx) {
                        return Err(ExecError::PeerUnreachable {
                            node: node.to_string(),
                            reason,
                            partial: partial(&results),
                        });
                    }
                }
            }
            let c = match rx.recv_timeout(timeout) {
                Ok(c) => c,
                Err(_) => {
                    let node = queues
                        .keys()
                        .find(|n| inflight.get(*n).copied().unwrap_or(0) > 0 && **n != self.inner.node)
                        .map_or_else(|| self.inner.node.clone(), |n| n.to_string());
                    return Err(ExecError::PeerUnreachable {
                        node,
                        reason: format!("no result within {timeout:?}"),
                        partial: partial(&results),
                    });
                }
            };
            let node = node_of[c.task];
            *inflight.get_mut(node).unwrap() -= graph.tasks[c.task].cores;
            match c.result {
                Ok(v) => results[c.task] = Some(v),
                Err(reason) => {
                    return Err(ExecError::TaskFailed {
                        task: graph.tasks[c.task].id.clone(),
                        node: node.to_string(),
                        reason,
                        partial: partial(&results),
                    })
                }
            }
            done += 1;
            for &j in &succ[c.task] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queues.entry(node_of[j]).or_default().push_back(j);
                }
            }
        }
        Ok(partial(&results))
    }

    fn resolve(&self, graph: &TaskGraph, i: usize, results: &[Option<Arc<TaskValue>>]) -> Vec<Arc<TaskValue>> {
        graph.tasks[i]
            .inputs
            .iter()
            .map(|input| match input {
                TaskInput::Literal(v) => v.clone(),
                TaskInput::Output(id) => {
                    let j = graph.index_of(id).expect("validated reference");
                    results[j].clone().expect("predecessor finished")
                }
            })
            .collect()
    }

    fn dispatch(
        &self,
        graph: &TaskGraph,
        i: usize,
        node: &str,
        inputs: Vec<Arc<TaskValue>>,
        run: &str,
        tx: &Sender<Completion>,
    ) -> Result<(), String> {
        let task = &graph.tasks[i];
        if node == self.inner.node {
            let f = self.inner.registry.get(&task.kind).cloned().expect("kind checked");
            let tx = tx.clone();
            self.inner.pool.execute(move || {
                let result = f(&inputs).map(Arc::new);
                let _ = tx.send(Completion { task: i, result });
            });
            return Ok(());
        }
        let bus = self.inner.bus.as_ref().ok_or("no bus for remote dispatch")?;
        let env = TaskEnvelope {
            run: run.to_string(),
            task: task.id.clone(),
            kind: task.kind.clone(),
            inputs: inputs.iter().map(|v| (**v).clone()).collect(),
            reply_to: self.inner.node.clone(),
        };
        let key = RoutingKey::agent_tasks(node).map_err(|e| e.to_string())?;
        let frame = Frame::with(key, self.inner.clock.now(), FrameType::Task, &env);
        match bus.publish(frame) {
            Ok(0) => Err(format!("no agent listening on {node}")),
            Ok(_) => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    }

    /// Runs `graph` on a helper thread.
    pub fn submit(&self, graph: TaskGraph, mode: ExecMode) -> CompletionHandle {
        let (tx, rx) = crossbeam_channel::bounded(1);
        let me = self.clone();
        thread::spawn(move || {
            let _ = tx.send(me.run(&graph, mode));
        });
        CompletionHandle { rx }
    }

    pub fn now(&self) -> Timestamp {
        self.inner.clock.now()
    }
}

/// Handle to a graph submitted with [`Agent::submit`].
pub struct CompletionHandle {
    rx: crossbeam_channel::Receiver<Result<RunReport, ExecError>>,
}

impl CompletionHandle {
    pub fn wait(self) -> Result<RunReport, ExecError> {
        self.rx.recv().expect("executor thread finished")
    }

    pub fn wait_timeout(&self, t: Duration) -> Option<Result<RunReport, ExecError>> {
        self.rx.recv_timeout(t).ok()
    }
}
