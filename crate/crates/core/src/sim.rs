//! The cycle loop: SMs with one RT unit each, warp buffers fed from a global
//! ray queue, a single memory port per RT unit shared by demand reads and
//! prefetches, and the timed memory hierarchy underneath.
//!
//! Rays run in phases (primary rays, then each bounce generation). The cycle
//! counter carries across phases.

use std::collections::{HashMap, VecDeque};

use crate::bvh::{self, node_footprint, FlatBvh};
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::intersect::HitRecord;
use crate::memhier::{AccessKind, MemoryHierarchy, ReqId, SECTOR_SIZE};
use crate::metrics::{streak_class, StatsLedger};
use crate::prefetch::{
    apply_perfect_mode, arbitrate, on_stack_event, IssueChoice, PrefetchPolicy, StackOp,
    ThreadPrefetcher,
};
use crate::rtunit::{AgentStatus, StackEvent, TraversalAgent};
use crate::scene::{generate_bounce_rays, generate_primary_rays_spp, Camera, Ray};

/// Ray results are stored here, one 32B record per ray.
pub const RESULT_BASE_ADDR: u64 = 0x8000_0000;

/// Upper bound on simulated cycles before a run is declared stuck.
const CYCLE_LIMIT: u64 = 1 << 40;

/// Per-pixel closest hits of the primary rays.
#[derive(Debug, Clone, PartialEq)]
pub struct HitBuffer {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<HitRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ledger: StatsLedger,
    pub hits: HitBuffer,
    /// Every simulated ray, all phases, with its final hit record.
    pub rays: Vec<Ray>,
    pub ray_hits: Vec<HitRecord>,
    pub trace: Option<Vec<StackEvent>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub trace: bool,
}

/// Loads the scene, builds the BVH and runs the experiment.
pub fn run_experiment(config: &SimConfig) -> Result<RunOutput> {
    let bvh = build_bvh(config)?;
    run_with_bvh(config, &bvh, RunOptions::default())
}

pub fn build_bvh(config: &SimConfig) -> Result<FlatBvh> {
    config.validate()?;
    let triangles = config.scene.load()?;
    bvh::build(&triangles, config.max_bvh_depth)
}

pub fn camera_for(config: &SimConfig, bvh: &FlatBvh) -> Camera {
    let b = bvh.root_aabb();
    Camera::framing(b.min, b.max, config.width, config.height)
}

/// Runs all ray phases over a prebuilt BVH.
pub fn run_with_bvh(config: &SimConfig, bvh: &FlatBvh, options: RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let camera = camera_for(config, bvh);
    camera.validate()?;
    let mut sim = Simulator::new(config, bvh, options);
    let spp = config.samples_per_pixel;
    let primary = generate_primary_rays_spp(&camera, spp, config.seed);
    let mut phase_hits = sim.run_phase(&primary)?;
    let pixels = phase_hits.iter().step_by(spp as usize).copied().collect();
    let mut rays = primary;
    let mut ray_hits = phase_hits.clone();
    for depth in 0..config.bounce_depth {
        let seed = config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(u64::from(depth) + 1));
        let bounce = generate_bounce_rays(&phase_hits, seed, 1);
        if bounce.is_empty() {
            break;
        }
        phase_hits = sim.run_phase(&bounce)?;
        rays.extend(bounce);
        ray_hits.extend(phase_hits.iter().copied());
    }
    let ledger = sim.finish()?;
    Ok(RunOutput {
        ledger,
        hits: HitBuffer {
            width: config.width,
            height: config.height,
            pixels,
        },
        rays,
        ray_hits,
        trace: sim.trace,
    })
}

#[derive(Debug)]
struct Thread {
    agent: TraversalAgent,
    pf: ThreadPrefetcher,
    pf_queue: VecDeque<u64>,
    /// Current DFS prefetch window below the top of the stack.
    pf_k: usize,
    /// Node whose chunks are being fetched, and how many are still missing.
    fetching: Option<u64>,
    pending: u32,
    compute_until: u64,
    leaf_window_until: u64,
    ray: usize,
    recorded: bool,
}

#[derive(Debug)]
struct DemandReq {
    chunk: u64,
    forced: bool,
    class: u8,
    lanes: Vec<usize>,
}

#[derive(Debug)]
struct Warp {
    threads: Vec<Thread>,
    demand: VecDeque<DemandReq>,
    in_flight: usize,
}

#[derive(Debug, Default)]
struct Sm {
    slots: Vec<Option<Warp>>,
    last_warp: Option<usize>,
    pf_rr: usize,
    pf_chunks: usize,
    last_prefetch: Option<u64>,
}

struct Simulator<'a> {
    cfg: &'a SimConfig,
    bvh: &'a FlatBvh,
    mem: MemoryHierarchy,
    sms: Vec<Sm>,
    in_flight: HashMap<ReqId, (usize, usize, Vec<usize>)>,
    next_req: ReqId,
    cycle: u64,
    ledger: StatsLedger,
    trace: Option<Vec<StackEvent>>,
    /// Global index of the first ray of the current phase.
    ray_base: usize,
}

impl<'a> Simulator<'a> {
    fn new(cfg: &'a SimConfig, bvh: &'a FlatBvh, options: RunOptions) -> Self {
        let sms = (0..cfg.sm_count)
            .map(|_| Sm {
                slots: (0..cfg.rt.warp_buffer_size).map(|_| None).collect(),
                ..Sm::default()
            })
            .collect();
        Self {
            cfg,
            bvh,
            mem: MemoryHierarchy::new(cfg.mem, cfg.sm_count),
            sms,
            in_flight: HashMap::new(),
            next_req: 0,
            cycle: 0,
            ledger: StatsLedger::default(),
            trace: options.trace.then(Vec::new),
            ray_base: 0,
        }
    }

    fn policy(&self) -> PrefetchPolicy {
        self.cfg.prefetch.policy
    }

    fn record(&mut self, events: &[StackEvent]) {
        if let Some(t) = &mut self.trace {
            t.extend_from_slice(events);
        }
    }

    fn run_phase(&mut self, rays: &[Ray]) -> Result<Vec<HitRecord>> {
        let mut results = vec![HitRecord::miss(); rays.len()];
        let warp_size = self.cfg.rt.warp_size;
        let mut warps = (0..rays.len()).step_by(warp_size).map(|s| s..(s + warp_size).min(rays.len()));
        let mut remaining = rays.len().div_ceil(warp_size);
        let mut queued = true;
        loop {
            let c = self.cycle;
            if c > CYCLE_LIMIT {
                return Err(Error::Deadlock(c));
            }
            self.mem.advance(c)?;
            self.deliver();
            let mut wake = u64::MAX;
            let mut busy = false;
            for sm in 0..self.sms.len() {
                for slot in 0..self.sms[sm].slots.len() {
                    if self.sms[sm].slots[slot].is_none() {
                        if !queued {
                            continue;
                        }
                        match warps.next() {
                            Some(range) => self.launch(sm, slot, rays, range)?,
                            None => {
                                queued = false;
                                continue;
                            }
                        }
                    }
                    let (b, w) = self.step_warp(sm, slot, &mut results)?;
                    busy |= b;
                    wake = wake.min(w);
                    let warp = self.sms[sm].slots[slot].as_ref().expect("slot occupied");
                    if warp.threads.iter().all(|t| t.recorded) && warp.demand.is_empty() && warp.in_flight == 0 {
                        self.drop_warp(sm, slot);
                        remaining -= 1;
                        busy = true;
                    }
                }
                self.issue(sm, c)?;
                let s = &self.sms[sm];
                busy |= s.pf_chunks > 0
                    || s.slots.iter().flatten().any(|w| !w.demand.is_empty());
            }
            if remaining == 0 {
                self.cycle = c + 1;
                break;
            }
            self.cycle = if busy {
                c + 1
            } else {
                let next = self.mem.next_activity().unwrap_or(u64::MAX).min(wake);
                if next == u64::MAX {
                    return Err(Error::Deadlock(c));
                }
                next.max(c + 1)
            };
        }
        self.ray_base += rays.len();
        Ok(results)
    }

    fn launch(&mut self, sm: usize, slot: usize, rays: &[Ray], range: std::ops::Range<usize>) -> Result<()> {
        let c = self.cycle;
        let mut threads = Vec::with_capacity(range.len());
        let mut events = Vec::new();
        for i in range {
            let id = self.ray_base + i;
            let mut agent = TraversalAgent::new(id, rays[i], &self.cfg.rt);
            let pushes = agent.init_traversal(self.bvh, c)?;
            let mut pf = ThreadPrefetcher::new(self.cfg.prefetch.intensity);
            if !pushes.is_empty() {
                on_stack_event(&mut pf.fsm, &mut pf.cursor, StackOp::Push, agent.stack());
            }
            events.extend(pushes);
            threads.push(Thread {
                agent,
                pf,
                pf_queue: VecDeque::new(),
                pf_k: 0,
                fetching: None,
                pending: 0,
                compute_until: 0,
                leaf_window_until: 0,
                ray: i,
                recorded: false,
            });
        }
        self.record(&events);
        self.sms[sm].slots[slot] = Some(Warp {
            threads,
            demand: VecDeque::new(),
            in_flight: 0,
        });
        Ok(())
    }

    fn drop_warp(&mut self, sm: usize, slot: usize) {
        let warp = self.sms[sm].slots[slot].take().expect("slot occupied");
        let left: usize = warp.threads.iter().map(|t| t.pf_queue.len()).sum();
        self.sms[sm].pf_chunks -= left;
    }

    fn deliver(&mut self) {
        for done in self.mem.drain_completions() {
            let (sm, slot, lanes) = self
                .in_flight
                .remove(&done.req)
                .expect("completion for a known request");
            let warp = self.sms[sm].slots[slot].as_mut().expect("warp waiting on memory");
            warp.in_flight -= 1;
            for lane in lanes {
                warp.threads[lane].pending -= 1;
            }
        }
    }

    /// Advances every thread of a warp by one cycle. Returns whether any
    /// thread needs the next cycle, and the earliest later wake-up time.
    fn step_warp(&mut self, sm: usize, slot: usize, results: &mut [HitRecord]) -> Result<(bool, u64)> {
        let c = self.cycle;
        let cfg = self.cfg;
        let bvh = self.bvh;
        let policy = self.policy();
        let perfect = policy.perfect_mode();
        let mut busy = false;
        let mut wake = u64::MAX;
        let mut events = Vec::new();
        let mut stores = Vec::new();
        let mut warp = self.sms[sm].slots[slot].take().expect("slot occupied");
        let mut new_pf = 0usize;
        let mut dropped_pf = 0usize;
        for lane in 0..warp.threads.len() {
            let t = &mut warp.threads[lane];
            if t.agent.status == AgentStatus::WaitingMem && t.pending == 0 {
                let addr = t.fetching.take().expect("fetch in progress");
                let node = bvh.node_at(addr)?;
                let out = t.agent.process(&node, c, &cfg.rt)?;
                if !out.events.is_empty() {
                    on_stack_event(&mut t.pf.fsm, &mut t.pf.cursor, StackOp::Push, t.agent.stack());
                    t.pf_k = 0;
                }
                events.extend(out.events);
                t.compute_until = c + out.latency;
                if out.leaf && policy == PrefetchPolicy::ParkLeaf {
                    t.leaf_window_until = c + out.latency;
                }
            }
            if t.agent.status == AgentStatus::Computing && c >= t.compute_until {
                t.agent.finish_compute();
            }
            if t.agent.status == AgentStatus::Ready {
                let pop = t.agent.pop(c).expect("ready agent has a stack entry");
                events.push(pop);
                let class = streak_class(t.agent.pop_streak);
                self.ledger.pop_streak[class] += 1;
                let size = bvh.node_size_at(pop.addr)?;
                let chunks = node_footprint(pop.addr, size);
                t.pending = chunks.len() as u32;
                t.fetching = Some(pop.addr);
                let forced = perfect.is_some_and(|m| apply_perfect_mode(m, t.agent.pop_streak));
                for chunk in chunks {
                    enqueue_demand(&mut warp.demand, chunk, forced, class as u8, lane);
                }
                let t = &mut warp.threads[lane];
                match policy {
                    PrefetchPolicy::TtpDfs => {
                        // the window drains below, as queue room allows
                        t.pf_k = t.pf.fsm.on_pop();
                    }
                    PrefetchPolicy::TtpBfs => {
                        let emitted = t.pf.lookahead.on_queue_pop(pop.addr, t.agent.stack(), cfg.prefetch.bfs_distance);
                        for addr in emitted {
                            for chunk in node_footprint(addr, bvh.node_size_at(addr)?) {
                                if t.pf_queue.len() >= cfg.prefetch.queue_capacity {
                                    t.pf_queue.pop_front();
                                    dropped_pf += 1;
                                }
                                t.pf_queue.push_back(chunk);
                                new_pf += 1;
                            }
                        }
                    }
                    _ => {}
                }
            }
            let t = &mut warp.threads[lane];
            match policy {
                PrefetchPolicy::TtpDfs => {
                    new_pf += drain_cursor(t, bvh, t.pf_k, usize::MAX, cfg.prefetch.queue_capacity)?;
                }
                PrefetchPolicy::ParkLeaf if c < t.leaf_window_until => {
                    new_pf += drain_cursor(t, bvh, cfg.rt.leaf_test_latency as usize, 1, cfg.prefetch.queue_capacity)?;
                    busy = true;
                }
                _ => {}
            }
            match t.agent.status {
                AgentStatus::Done if !t.recorded => {
                    t.recorded = true;
                    results[t.ray] = t.agent.best;
                    self.ledger.rays += 1;
                    self.ledger.node_visits += t.agent.nodes_visited;
                    self.ledger.max_nodes_per_ray = self.ledger.max_nodes_per_ray.max(t.agent.nodes_visited);
                    stores.push(RESULT_BASE_ADDR + (self.ray_base + t.ray) as u64 * SECTOR_SIZE);
                }
                AgentStatus::Computing => wake = wake.min(t.compute_until),
                AgentStatus::WaitingMem if t.pending == 0 => busy = true,
                _ => {}
            }
        }
        self.sms[sm].pf_chunks += new_pf;
        self.sms[sm].pf_chunks -= dropped_pf;
        self.sms[sm].slots[slot] = Some(warp);
        self.record(&events);
        for s in stores {
            self.mem.store(s)?;
        }
        Ok((busy, wake))
    }

    /// One request through the RT unit's memory port.
    fn issue(&mut self, sm: usize, c: u64) -> Result<()> {
        let s = &self.sms[sm];
        let pending: Vec<bool> = s
            .slots
            .iter()
            .map(|w| w.as_ref().is_some_and(|w| !w.demand.is_empty()))
            .collect();
        let demand = pending.iter().any(|&p| p);
        let choice = arbitrate(demand, s.pf_chunks > 0, self.cfg.prefetch.arbitration, c, s.last_prefetch);
        match choice {
            None => {}
            Some(IssueChoice::Demand) => {
                let slot = crate::rtunit::select_warp(&pending, s.last_warp).expect("a warp has demand");
                self.sms[sm].last_warp = Some(slot);
                let warp = self.sms[sm].slots[slot].as_mut().expect("slot occupied");
                let req = warp.demand.front().expect("demand pending");
                let id = self.next_req;
                self.ledger.l1_attempts += 1;
                let accepted = if req.forced {
                    self.mem.force_hit(sm, req.chunk, id, c)?;
                    true
                } else {
                    let out = self
                        .mem
                        .access(sm, req.chunk, AccessKind::Demand, Some((id, req.class)), c)?;
                    if out.category.is_miss() {
                        self.ledger.pop_streak_l1_miss[req.class as usize] += 1;
                    }
                    !out.category.is_stall()
                };
                if accepted {
                    let req = warp.demand.pop_front().expect("demand pending");
                    warp.in_flight += 1;
                    self.in_flight.insert(id, (sm, slot, req.lanes));
                    self.next_req += 1;
                }
            }
            Some(IssueChoice::Prefetch) => {
                let s = &mut self.sms[sm];
                let lanes: Vec<(usize, usize)> = s
                    .slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, w)| w.as_ref().map(|w| (i, w.threads.len())))
                    .flat_map(|(i, n)| (0..n).map(move |l| (i, l)))
                    .collect();
                let n = lanes.len();
                let start = s.pf_rr % n.max(1);
                let pick = (0..n).map(|k| (start + k) % n).find(|&k| {
                    let (slot, lane) = lanes[k];
                    !s.slots[slot].as_ref().expect("occupied").threads[lane].pf_queue.is_empty()
                });
                let k = pick.expect("prefetch pending");
                let (slot, lane) = lanes[k];
                s.pf_rr = k + 1;
                let chunk = s.slots[slot].as_mut().expect("occupied").threads[lane]
                    .pf_queue
                    .pop_front()
                    .expect("non-empty");
                s.pf_chunks -= 1;
                s.last_prefetch = Some(c);
                self.ledger.l1_attempts += 1;
                // stalled prefetches are dropped
                self.mem.access(sm, chunk, AccessKind::Prefetch, None, c)?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<StatsLedger> {
        // Let outstanding prefetches land so cache counters are final.
        let mut c = self.cycle;
        while !self.mem.is_quiescent() {
            self.mem.advance(c)?;
            self.mem.drain_completions();
            c = self.mem.next_activity().unwrap_or(c + 1).max(c + 1);
        }
        self.mem.check_conservation().map_err(Error::InvalidConfig)?;
        let mut l = std::mem::take(&mut self.ledger);
        l.cycles = self.cycle;
        l.l1 = self.mem.l1_stats();
        l.l2 = self.mem.l2().stats;
        l.dram_reads = self.mem.dram().reads;
        l.dram_writebacks = self.mem.dram().writebacks;
        l.dram_bw_util = self.mem.dram().bandwidth_utilization(0, self.cycle.max(1));
        l.pop_streak_dram_miss = self.mem.dram_demand_misses_by_class;
        l.l2_attempts = self.mem.l2_attempts;
        l.check_identities().map_err(Error::InvalidConfig)?;
        Ok(l)
    }
}

fn enqueue_demand(queue: &mut VecDeque<DemandReq>, chunk: u64, forced: bool, class: u8, lane: usize) {
    match queue.iter_mut().find(|r| r.chunk == chunk && r.forced == forced) {
        Some(r) => r.lanes.push(lane),
        None => queue.push_back(DemandReq {
            chunk,
            forced,
            class,
            lanes: vec![lane],
        }),
    }
}

/// Moves stack entries from the prefetch window into the thread's chunk queue
/// while whole nodes fit, at most `max_nodes` of them.
fn drain_cursor(t: &mut Thread, bvh: &FlatBvh, k: usize, max_nodes: usize, capacity: usize) -> Result<usize> {
    let mut added = 0;
    for _ in 0..max_nodes {
        let mut probe = t.pf.cursor;
        let Some(&addr) = probe.advance_bounded(t.agent.stack(), k, 1).first() else {
            break;
        };
        let chunks = node_footprint(addr, bvh.node_size_at(addr)?);
        if t.pf_queue.len() + chunks.len() > capacity {
            break;
        }
        t.pf.cursor = probe;
        added += chunks.len();
        t.pf_queue.extend(chunks);
    }
    Ok(added)
}
