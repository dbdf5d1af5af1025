//! Deterministic update schedule and simulated message passing.
//!
//! Time is counted in ticks. In each tick every link first delivers what is
//! due; then nodes take global steps from the root down, then local steps
//! from the leaves up. A node keeps exactly `target_tau` predictions in
//! flight in steady state: it takes a global step only when it holds
//! `target_tau` unanswered predictions (or the stream is exhausted), and a
//! local step only while it holds fewer.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};
use crate::global::{backprop_update, corrective_update, delayed_global_update, GlobalRule, PendingRecord, RuleKind};
use crate::learner::{learning_rate, Example};
use crate::local::{internal_input, node_local_update, node_predict, NodeSchedules, TreeLearner};
use crate::loss::LossSpec;
use crate::sparse::SparseVector;
use crate::topology::{NodeId, ShardPlan, Topology};

pub const DEFAULT_TARGET_TAU: u64 = 1024;
pub const DEFAULT_BUFFER_CAPACITY: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Warmup,
    Steady,
    Drain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    DoLocal,
    DoGlobal,
    Wait,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::DoLocal => "local",
            Action::DoGlobal => "global",
            Action::Wait => "wait",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSchedule {
    pub target_tau: u64,
    pub buffer_capacity: usize,
    pub mode: Mode,
    last: Option<Action>,
}

impl NodeSchedule {
    pub fn new(target_tau: u64, buffer_capacity: usize) -> Result<Self> {
        if target_tau == 0 {
            return Err(Error::config("target tau must be at least 1"));
        }
        if target_tau > buffer_capacity as u64 {
            return Err(Error::config(format!(
                "target tau {target_tau} exceeds buffer capacity {buffer_capacity}"
            )));
        }
        Ok(NodeSchedule { target_tau, buffer_capacity, mode: Mode::Warmup, last: None })
    }

    fn note(&mut self, a: Action) {
        if a != Action::Wait {
            self.last = Some(a);
        }
        if a == Action::DoGlobal && self.mode == Mode::Warmup {
            self.mode = Mode::Steady;
        }
    }
}

/// Next action for a node holding `inflight` unanswered predictions with
/// `responses` answers waiting, `input_ready` telling whether its next
/// instance has arrived, and `remaining` instances still to process.
pub fn schedule_next(ns: &mut NodeSchedule, inflight: u64, responses: u64, input_ready: bool, remaining: u64) -> Action {
    if remaining == 0 {
        ns.mode = Mode::Drain;
    }
    let can_local = remaining > 0 && input_ready && inflight < ns.target_tau;
    let can_global = responses > 0 && (inflight >= ns.target_tau || remaining == 0);
    let a = match (can_local, can_global) {
        (true, true) => {
            if ns.last == Some(Action::DoLocal) {
                Action::DoGlobal
            } else {
                Action::DoLocal
            }
        }
        (true, false) => Action::DoLocal,
        (false, true) => Action::DoGlobal,
        (false, false) => Action::Wait,
    };
    ns.note(a);
    a
}

/// In-order link with a fixed delay in ticks.
#[derive(Debug, Clone)]
pub struct LinkQueue<T> {
    pub link_delay: u64,
    queue: VecDeque<(u64, T)>,
}

impl<T> LinkQueue<T> {
    pub fn new(link_delay: u64) -> Self {
        LinkQueue { link_delay, queue: VecDeque::new() }
    }

    pub fn send(&mut self, now: u64, payload: T) {
        self.queue.push_back((now + self.link_delay, payload));
    }

    /// Messages due by `now`, in send order.
    pub fn deliver(&mut self, now: u64) -> Vec<T> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|(at, _)| *at <= now) {
            out.push(self.queue.pop_front().expect("front exists").1);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct UpMsg {
    t: u64,
    value: f64,
    y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DownMsg {
    t: u64,
    yhat: f64,
    /// Gradient with respect to the receiver's transmitted value.
    grad: f64,
}

/// One trace line: `t,node,action,inflight` (in flight after the action).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub node: NodeId,
    pub action: Action,
    pub inflight: u64,
    pub mode: Mode,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "t,node,action,inflight";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.t, self.node, self.action, self.inflight)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub ticks: u64,
    pub up_sent: u64,
    pub up_received: u64,
    pub down_sent: u64,
    pub responses_consumed: u64,
    pub waits: u64,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub rule: GlobalRule,
    pub target_tau: u64,
    pub buffer_capacity: usize,
    pub passes: u32,
    pub trace: bool,
}

impl SimConfig {
    pub fn new(rule: GlobalRule, target_tau: u64) -> Self {
        SimConfig { rule, target_tau, buffer_capacity: DEFAULT_BUFFER_CAPACITY, passes: 1, trace: false }
    }
}

#[derive(Debug)]
pub struct SimResult {
    pub tree: TreeLearner,
    pub trace: Vec<TraceRow>,
    pub stats: SimStats,
}

struct SimNode {
    sched: NodeSchedule,
    n_local: u64,
    records: VecDeque<PendingRecord>,
    responses: VecDeque<DownMsg>,
    inbox: Vec<VecDeque<UpMsg>>,
}

struct Sim<'a> {
    tree: TreeLearner,
    rule: GlobalRule,
    data: &'a [Example],
    total: u64,
    nodes: Vec<SimNode>,
    up: Vec<Option<LinkQueue<UpMsg>>>,
    down: Vec<Option<LinkQueue<DownMsg>>>,
    routed: BTreeMap<u64, (Vec<SparseVector>, usize)>,
    trace: Option<Vec<TraceRow>>,
    stats: SimStats,
    tick: u64,
}

impl Sim<'_> {
    fn example(&self, t: u64) -> &Example {
        &self.data[((t - 1) % self.data.len() as u64) as usize]
    }

    fn remaining(&self, id: NodeId) -> u64 {
        self.total - self.nodes[id].n_local
    }

    fn input_ready(&self, id: NodeId) -> bool {
        let spec = self.tree.topo.node(id);
        spec.is_leaf() || self.nodes[id].inbox.iter().all(|q| !q.is_empty())
    }

    fn log(&mut self, t: u64, node: NodeId, action: Action) {
        let inflight = self.nodes[node].records.len() as u64;
        let mode = self.nodes[node].sched.mode;
        if let Some(tr) = &mut self.trace {
            tr.push(TraceRow { t, node, action, inflight, mode });
        }
    }

    fn send_up(&mut self, from: NodeId, msg: UpMsg) {
        let parent = self.tree.topo.parent(from).expect("non-root");
        let slot = self.tree.topo.slot_in_parent(from).expect("non-root");
        let link = self.up[from].as_mut().expect("link to parent");
        link.send(self.tick, msg);
        self.stats.up_sent += 1;
        for m in link.deliver(self.tick) {
            self.nodes[parent].inbox[slot].push_back(m);
            self.stats.up_received += 1;
        }
    }

    fn send_down(&mut self, to: NodeId, msg: DownMsg) {
        let link = self.down[to].as_mut().expect("link from parent");
        link.send(self.tick, msg);
        self.stats.down_sent += 1;
        for m in link.deliver(self.tick) {
            self.nodes[to].responses.push_back(m);
        }
    }

    fn deliver_all(&mut self) {
        for id in 0..self.nodes.len() {
            if let Some(link) = self.up[id].as_mut() {
                let msgs = link.deliver(self.tick);
                if !msgs.is_empty() {
                    let parent = self.tree.topo.parent(id).expect("non-root");
                    let slot = self.tree.topo.slot_in_parent(id).expect("non-root");
                    self.stats.up_received += msgs.len() as u64;
                    self.nodes[parent].inbox[slot].extend(msgs);
                }
            }
            if let Some(link) = self.down[id].as_mut() {
                let msgs = link.deliver(self.tick);
                self.nodes[id].responses.extend(msgs);
            }
        }
    }

    fn leaf_input(&mut self, id: NodeId, t: u64) -> SparseVector {
        let n_leaves = self.tree.topo.n_shards();
        if !self.routed.contains_key(&t) {
            let parts = self.tree.leaf_inputs(&self.example(t).x.clone()).expect("plan checked");
            self.routed.insert(t, (parts, n_leaves));
        }
        let entry = self.routed.get_mut(&t).expect("inserted");
        let x = std::mem::take(&mut entry.0[id]);
        entry.1 -= 1;
        if entry.1 == 0 {
            self.routed.remove(&t);
        }
        x
    }

    fn local_step(&mut self, id: NodeId) -> Result<()> {
        let t = self.nodes[id].n_local + 1;
        let loss = self.tree.loss;
        let topo_root = self.tree.topo.root();
        let spec = self.tree.topo.node(id).clone();
        let (input, y) = if spec.is_leaf() {
            let y = self.example(t).y;
            (self.leaf_input(id, t), y)
        } else {
            let mut vals = Vec::with_capacity(spec.fan_in);
            let mut y = 0.0;
            for q in &mut self.nodes[id].inbox {
                let m = q.pop_front().expect("input ready");
                if m.t != t {
                    return Err(Error::contract(format!("node {id} expected input for {t}, got {}", m.t)));
                }
                vals.push(m.value);
                y = m.y;
            }
            (internal_input(&spec, &vals)?, y)
        };
        let state = &mut self.tree.nodes[id];
        let pred = node_predict(&spec, state, &input)?;
        state.metrics.record(pred.raw, y);
        self.nodes[id].n_local = t;

        if id == topo_root {
            let yhat = pred.sent;
            self.tree.metrics.record(yhat, y);
            let w_pre: Vec<f64> = if spec.is_leaf() {
                Vec::new()
            } else {
                state.model.weights()[..spec.fan_in].to_vec()
            };
            node_local_update(state, &input, pred.raw, y, loss)?;
            if self.rule.kind.uses_feedback() {
                let g = self.rule.backprop_scale * loss.d1(yhat, y);
                let children = self.tree.topo.children(id).to_vec();
                for (slot, c) in children.into_iter().enumerate() {
                    self.send_down(c, DownMsg { t, yhat, grad: g * w_pre[slot] });
                }
            }
            self.log(t, id, Action::DoLocal);
            return Ok(());
        }

        let mut rec = PendingRecord::new(t, input, y, pred.sent);
        rec.p_raw = pred.raw;
        rec.thresholded = spec.threshold_output;
        let sent = match self.rule.kind {
            RuleKind::Local => {
                node_local_update(state, &rec.x, pred.raw, y, loss)?;
                pred.sent
            }
            RuleKind::DelayedGlobal => pred.sent,
            RuleKind::Corrective => {
                let eta = node_local_update(state, &rec.x, pred.raw, y, loss)?;
                rec.local = Some((loss.d1(pred.raw, y), eta));
                pred.sent
            }
            RuleKind::Backprop => {
                node_local_update(state, &rec.x, pred.raw, y, loss)?;
                let after = node_predict(&spec, state, &rec.x)?;
                rec.p = after.sent;
                rec.p_raw = after.raw;
                if !spec.is_leaf() {
                    rec.child_weights = state.model.weights()[..spec.fan_in].to_vec();
                }
                after.sent
            }
            RuleKind::MinibatchGd | RuleKind::MinibatchCg => {
                return Err(Error::config("minibatch rules do not run on a tree"));
            }
        };
        if self.rule.kind.uses_feedback() {
            self.nodes[id].records.push_back(rec);
        }
        self.send_up(id, UpMsg { t, value: sent, y });
        self.log(t, id, Action::DoLocal);
        Ok(())
    }

    fn global_step(&mut self, id: NodeId) -> Result<()> {
        let loss = self.tree.loss;
        let node = &mut self.nodes[id];
        let msg = node.responses.pop_front().expect("response available");
        let mut rec = node.records.pop_front().ok_or_else(|| Error::contract(format!("node {id}: response without a pending record")))?;
        if rec.t != msg.t {
            return Err(Error::contract(format!("node {id}: response for {} but oldest record is {}", msg.t, rec.t)));
        }
        let n_local = node.n_local;
        self.stats.responses_consumed += 1;
        let state = &mut self.tree.nodes[id];
        let eta = learning_rate(&state.schedule, n_local.max(1))?;
        let w = state.model.weights_mut();
        let to_children = match self.rule.kind {
            RuleKind::DelayedGlobal => {
                delayed_global_update(w, &mut rec, msg.yhat, eta, loss)?;
                None
            }
            RuleKind::Corrective => {
                corrective_update(w, &mut rec, msg.yhat, eta, loss)?;
                None
            }
            RuleKind::Backprop => Some(backprop_update(w, &mut rec, msg.grad, eta)?.to_children),
            _ => return Err(Error::contract("global step under a rule without feedback")),
        };
        if !state.model.all_finite() {
            return Err(Error::NumericOverflow { step: n_local });
        }
        let children = self.tree.topo.children(id).to_vec();
        for (slot, c) in children.into_iter().enumerate() {
            let grad = to_children.as_ref().map_or(0.0, |m| m[slot]);
            self.send_down(c, DownMsg { t: msg.t, yhat: msg.yhat, grad });
        }
        self.log(msg.t, id, Action::DoGlobal);
        Ok(())
    }

    fn done(&self) -> bool {
        self.nodes.iter().all(|n| n.n_local == self.total && n.records.is_empty())
            && self.up.iter().flatten().all(LinkQueue::is_empty)
            && self.down.iter().flatten().all(LinkQueue::is_empty)
    }

    fn run(&mut self) -> Result<()> {
        let root = self.tree.topo.root();
        let mut top_down = self.tree.topo.bottom_up();
        top_down.reverse();
        let bottom_up = self.tree.topo.bottom_up();
        let max_delay = self.tree.topo.edges().iter().map(|e| e.link_delay).max().unwrap_or(0);
        let stall_limit = 4 * (max_delay + 1) * (self.tree.topo.depth() as u64 + 1) + 8;
        let mut idle = 0;
        while !self.done() {
            self.tick += 1;
            self.deliver_all();
            let mut progressed = false;
            if self.rule.kind.uses_feedback() {
                for &id in &top_down {
                    if id == root {
                        continue;
                    }
                    let inflight = self.nodes[id].records.len() as u64;
                    let responses = self.nodes[id].responses.len() as u64;
                    let remaining = self.remaining(id);
                    let ready = self.input_ready(id);
                    if schedule_next(&mut self.nodes[id].sched, inflight, responses, ready, remaining) == Action::DoGlobal {
                        self.global_step(id)?;
                        progressed = true;
                    }
                }
            }
            for &id in &bottom_up {
                let inflight = self.nodes[id].records.len() as u64;
                let remaining = self.remaining(id);
                let ready = self.input_ready(id);
                // Responses were handled in the global pass; here only local
                // work is considered.
                let action = schedule_next(&mut self.nodes[id].sched, inflight, 0, ready, remaining);
                match action {
                    Action::DoLocal => {
                        self.local_step(id)?;
                        progressed = true;
                    }
                    _ => self.stats.waits += u64::from(remaining > 0),
                }
            }
            if progressed {
                idle = 0;
            } else {
                idle += 1;
                if idle > stall_limit {
                    return Err(Error::contract(format!("schedule stalled at tick {}", self.tick)));
                }
            }
        }
        self.stats.ticks = self.tick;
        Ok(())
    }
}

/// Runs a tree under `config.rule` on `data` repeated `config.passes` times.
/// Results depend only on the inputs and the configuration.
pub fn run_simulation(
    topo: &Topology,
    plan: &ShardPlan,
    data: &[Example],
    schedules: &NodeSchedules,
    bits: u32,
    loss: LossSpec,
    config: &SimConfig,
) -> Result<SimResult> {
    config.rule.validate()?;
    if config.rule.kind.is_minibatch() {
        return Err(Error::config("minibatch rules train a single global model without delay"));
    }
    if config.passes == 0 {
        return Err(Error::config("passes must be at least 1"));
    }
    let tree = TreeLearner::new(topo.clone(), *plan, bits, schedules, loss)?;
    let sched = NodeSchedule::new(config.target_tau, config.buffer_capacity)?;
    let n = topo.nodes().len();
    let nodes = (0..n)
        .map(|id| SimNode {
            sched: sched.clone(),
            n_local: 0,
            records: VecDeque::new(),
            responses: VecDeque::new(),
            inbox: vec![VecDeque::new(); topo.children(id).len()],
        })
        .collect();
    let up = (0..n).map(|id| topo.link_delay(id).map(LinkQueue::new)).collect();
    let down = (0..n).map(|id| topo.link_delay(id).map(LinkQueue::new)).collect();
    let mut sim = Sim {
        tree,
        rule: config.rule,
        data,
        total: if data.is_empty() { 0 } else { data.len() as u64 * config.passes as u64 },
        nodes,
        up,
        down,
        routed: BTreeMap::new(),
        trace: config.trace.then(Vec::new),
        stats: SimStats::default(),
        tick: 0,
    };
    sim.run()?;
    Ok(SimResult { tree: sim.tree, trace: sim.trace.unwrap_or_default(), stats: sim.stats })
}
