//! Per-thread traversal agents, warp-level request coalescing and the warp
//! scheduler of the RT unit.
//!
//! An agent walks the BVH with a LIFO stack (DFS) or a FIFO queue (BFS) of
//! node addresses. Every pop is a memory read of the whole node record; the
//! simulator delivers the data and the agent runs the box or triangle tests.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::bvh::{BvhNode, FlatBvh};
use crate::error::{Error, Result};
use crate::intersect::{ray_box_test, ray_triangle_test, HitRecord};
use crate::scene::{Ray, RayMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraversalOrder {
    #[default]
    Dfs,
    Bfs,
}

impl fmt::Display for TraversalOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraversalOrder::Dfs => "dfs",
            TraversalOrder::Bfs => "bfs",
        })
    }
}

impl FromStr for TraversalOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dfs" => Ok(TraversalOrder::Dfs),
            "bfs" => Ok(TraversalOrder::Bfs),
            _ => Err(format!("unknown traversal order {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtUnitConfig {
    pub warp_size: usize,
    pub warp_buffer_size: usize,
    pub traversal_order: TraversalOrder,
    pub box_test_latency: u64,
    pub leaf_test_latency: u64,
    pub max_stack_depth: usize,
    /// BFS frontiers are much wider than DFS stacks, so the queue has its own
    /// bound.
    pub max_queue_len: usize,
    /// Push hit children far-to-near so the nearest is popped first.
    pub near_child_first: bool,
}

impl Default for RtUnitConfig {
    fn default() -> Self {
        Self {
            warp_size: 32,
            warp_buffer_size: 4,
            traversal_order: TraversalOrder::Dfs,
            box_test_latency: 4,
            leaf_test_latency: 8,
            max_stack_depth: 64,
            max_queue_len: 4096,
            near_child_first: false,
        }
    }
}

impl RtUnitConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("warp_size", self.warp_size as u64),
            ("warp_buffer_size", self.warp_buffer_size as u64),
            ("box_test_latency", self.box_test_latency),
            ("leaf_test_latency", self.leaf_test_latency),
            ("max_stack_depth", self.max_stack_depth as u64),
            ("max_queue_len", self.max_queue_len as u64),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn capacity(&self) -> usize {
        match self.traversal_order {
            TraversalOrder::Dfs => self.max_stack_depth,
            TraversalOrder::Bfs => self.max_queue_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StackEventKind {
    Push,
    Pop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StackEvent {
    pub thread_id: usize,
    pub kind: StackEventKind,
    pub addr: u64,
    pub cycle: u64,
}

impl fmt::Display for StackEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            StackEventKind::Push => "push",
            StackEventKind::Pop => "pop",
        };
        write!(f, "{} {} {} {:#x}", self.cycle, self.thread_id, kind, self.addr)
    }
}

/// Writes one `cycle thread_id push|pop 0xADDR` line per event.
pub fn write_trace<W: Write>(mut out: W, events: &[StackEvent]) -> io::Result<()> {
    for e in events {
        writeln!(out, "{e}")?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentStatus {
    WaitingMem,
    Computing,
    Ready,
    Done,
}

/// What the tests on a fetched node did.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutcome {
    pub events: Vec<StackEvent>,
    pub latency: u64,
    pub leaf: bool,
}

#[derive(Debug, Clone)]
pub struct TraversalAgent {
    pub thread_id: usize,
    pub ray: Ray,
    order: TraversalOrder,
    capacity: usize,
    near_child_first: bool,
    stack: VecDeque<u64>,
    pub min_thit: f32,
    pub best: HitRecord,
    pub status: AgentStatus,
    pub pop_streak: u32,
    pub nodes_visited: u64,
}

impl TraversalAgent {
    pub fn new(thread_id: usize, ray: Ray, config: &RtUnitConfig) -> Self {
        Self {
            thread_id,
            ray,
            order: config.traversal_order,
            capacity: config.capacity(),
            near_child_first: config.near_child_first,
            stack: VecDeque::new(),
            min_thit: ray.t_max,
            best: HitRecord::miss(),
            status: AgentStatus::Ready,
            pop_streak: 0,
            nodes_visited: 0,
        }
    }

    /// Stack (DFS, top at the back) or queue (BFS, head at the front).
    pub fn stack(&self) -> &VecDeque<u64> {
        &self.stack
    }

    pub fn order(&self) -> TraversalOrder {
        self.order
    }

    pub fn is_done(&self) -> bool {
        self.status == AgentStatus::Done
    }

    fn push(&mut self, addr: u64, cycle: u64) -> Result<StackEvent> {
        if self.stack.len() >= self.capacity {
            return Err(Error::StackOverflow {
                thread: self.thread_id,
                depth: self.stack.len() + 1,
                max: self.capacity,
            });
        }
        self.stack.push_back(addr);
        self.pop_streak = 0;
        Ok(StackEvent {
            thread_id: self.thread_id,
            kind: StackEventKind::Push,
            addr,
            cycle,
        })
    }

    /// Pushes the root if the ray enters the scene box; otherwise the agent
    /// finishes immediately with a miss.
    pub fn init_traversal(&mut self, bvh: &FlatBvh, cycle: u64) -> Result<Vec<StackEvent>> {
        let mut events = Vec::new();
        match ray_box_test(&self.ray, &bvh.root_aabb()) {
            Some(t) if t < self.min_thit => {
                events.push(self.push(bvh.root_addr(), cycle)?);
                self.status = AgentStatus::Ready;
            }
            _ => self.status = AgentStatus::Done,
        }
        Ok(events)
    }

    /// Takes the next node to fetch. The caller issues the memory read and
    /// calls [`Self::process`] once the data is back.
    pub fn pop(&mut self, cycle: u64) -> Option<StackEvent> {
        if self.status != AgentStatus::Ready {
            return None;
        }
        let addr = match self.order {
            TraversalOrder::Dfs => self.stack.pop_back(),
            TraversalOrder::Bfs => self.stack.pop_front(),
        }?;
        self.pop_streak += 1;
        self.nodes_visited += 1;
        self.status = AgentStatus::WaitingMem;
        Some(StackEvent {
            thread_id: self.thread_id,
            kind: StackEventKind::Pop,
            addr,
            cycle,
        })
    }

    /// Runs the intersection tests for a fetched node.
    pub fn process(&mut self, node: &BvhNode, cycle: u64, config: &RtUnitConfig) -> Result<NodeOutcome> {
        let mut events = Vec::new();
        let (latency, leaf) = match node {
            BvhNode::Internal { children, .. } => {
                let mut hits: Vec<(f32, u64)> = children
                    .iter()
                    .filter_map(|c| {
                        ray_box_test(&self.ray, &c.aabb)
                            .filter(|&t| t < self.min_thit)
                            .map(|t| (t, c.addr))
                    })
                    .collect();
                if self.near_child_first {
                    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
                }
                for (_, addr) in hits {
                    events.push(self.push(addr, cycle)?);
                }
                (config.box_test_latency, false)
            }
            BvhNode::Leaf { triangle, .. } => {
                if let Some(t) = ray_triangle_test(&self.ray, triangle) {
                    if self.best.is_improved_by(t, triangle.id) {
                        self.best = HitRecord::from_triangle(&self.ray, triangle, t);
                        self.min_thit = t;
                    }
                }
                (config.leaf_test_latency, true)
            }
        };
        self.status = AgentStatus::Computing;
        Ok(NodeOutcome {
            events,
            latency,
            leaf,
        })
    }

    /// Ends the compute phase of the current node.
    pub fn finish_compute(&mut self) {
        let early_exit = self.ray.mode == RayMode::AnyHit && self.best.hit;
        self.status = if self.stack.is_empty() || early_exit {
            AgentStatus::Done
        } else {
            AgentStatus::Ready
        };
    }
}

/// Untimed traversal of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub hit: HitRecord,
    pub events: Vec<StackEvent>,
    pub nodes_visited: u64,
}

impl Traversal {
    pub fn pop_order(&self) -> Vec<u64> {
        self.events
            .iter()
            .filter(|e| e.kind == StackEventKind::Pop)
            .map(|e| e.addr)
            .collect()
    }
}

/// Runs a ray to completion with no memory timing; event cycles count node
/// fetches.
pub fn traverse(bvh: &FlatBvh, ray: Ray, config: &RtUnitConfig) -> Result<Traversal> {
    let mut agent = TraversalAgent::new(0, ray, config);
    let mut events = agent.init_traversal(bvh, 0)?;
    let mut step = 0;
    while let Some(pop) = agent.pop(step) {
        events.push(pop);
        let node = bvh.node_at(pop.addr)?;
        events.extend(agent.process(&node, step, config)?.events);
        agent.finish_compute();
        step += 1;
    }
    Ok(Traversal {
        hit: agent.best,
        events,
        nodes_visited: agent.nodes_visited,
    })
}

/// A unique chunk request after coalescing, with every lane that wants it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoalescedRequest {
    pub chunk: u64,
    pub subscribers: Vec<usize>,
}

/// Merges `(thread_id, chunk)` requests from one warp by chunk address,
/// keeping first-appearance order.
pub fn coalesce(requests: &[(usize, u64)]) -> Vec<CoalescedRequest> {
    let mut out: Vec<CoalescedRequest> = Vec::new();
    for &(thread, chunk) in requests {
        match out.iter_mut().find(|r| r.chunk == chunk) {
            Some(r) => r.subscribers.push(thread),
            None => out.push(CoalescedRequest {
                chunk,
                subscribers: vec![thread],
            }),
        }
    }
    out
}

/// Round-robin pick among slots with pending work, starting after `last`.
pub fn select_warp(pending: &[bool], last: Option<usize>) -> Option<usize> {
    let n = pending.len();
    if n == 0 {
        return None;
    }
    let start = last.map_or(0, |l| (l + 1) % n);
    (0..n).map(|i| (start + i) % n).find(|&i| pending[i])
}
