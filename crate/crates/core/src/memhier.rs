//! Timed memory hierarchy: per-SM L1 sector caches, a shared L2, and a
//! fixed-latency DRAM with a per-cycle acceptance cap.
//!
//! Requests are 32B sectors. Caches track 128B lines with per-sector valid
//! bits and allocate MSHR entries per outstanding sector. All in-flight work
//! lives in one event queue ordered by `(cycle, sequence)`, so a run is fully
//! deterministic.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

pub const LINE_SIZE: u64 = 128;
pub const SECTOR_SIZE: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Associativity {
    Full,
    Ways(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub capacity: u64,
    pub associativity: Associativity,
    pub line_size: u64,
    pub sector_size: u64,
    pub hit_latency: u64,
    pub mshr_entries: usize,
    pub mshr_merge_capacity: usize,
}

impl CacheConfig {
    /// 32KB fully associative, 20 cycles, 256 MSHRs.
    pub fn l1_default() -> Self {
        Self {
            capacity: 32 * 1024,
            associativity: Associativity::Full,
            line_size: LINE_SIZE,
            sector_size: SECTOR_SIZE,
            hit_latency: 20,
            mshr_entries: 256,
            mshr_merge_capacity: 8,
        }
    }

    /// 512KB 16-way, 160 cycles, 768 MSHRs.
    pub fn l2_default() -> Self {
        Self {
            capacity: 512 * 1024,
            associativity: Associativity::Ways(16),
            line_size: LINE_SIZE,
            sector_size: SECTOR_SIZE,
            hit_latency: 160,
            mshr_entries: 768,
            mshr_merge_capacity: 8,
        }
    }

    pub fn lines(&self) -> u64 {
        self.capacity / self.line_size
    }

    pub fn ways(&self) -> usize {
        match self.associativity {
            Associativity::Full => self.lines() as usize,
            Associativity::Ways(w) => w,
        }
    }

    pub fn sets(&self) -> usize {
        (self.lines() as usize / self.ways()).max(1)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{name}: {msg}")));
        if self.line_size != LINE_SIZE || self.sector_size != SECTOR_SIZE {
            return bad(format!(
                "only {LINE_SIZE}B lines with {SECTOR_SIZE}B sectors are modeled"
            ));
        }
        if self.capacity == 0 || !self.capacity.is_multiple_of(self.line_size) {
            return bad(format!(
                "capacity {} is not a positive multiple of the line size",
                self.capacity
            ));
        }
        if let Associativity::Ways(w) = self.associativity {
            if w == 0 || !self.lines().is_multiple_of(w as u64) {
                return bad(format!("{w} ways do not divide {} lines", self.lines()));
            }
        }
        if self.hit_latency == 0 || self.mshr_entries == 0 || self.mshr_merge_capacity == 0 {
            return bad("latency, MSHR entries and merge capacity must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramConfig {
    pub latency: u64,
    pub accept_per_cycle: u32,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            latency: 200,
            accept_per_cycle: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Demand,
    Prefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessCategory {
    Hit,
    HitMshrMerged,
    HitMshrFull,
    MissMshrAvailable,
    MissMshrFull,
}

impl AccessCategory {
    pub const ALL: [AccessCategory; 5] = [
        AccessCategory::Hit,
        AccessCategory::HitMshrMerged,
        AccessCategory::HitMshrFull,
        AccessCategory::MissMshrAvailable,
        AccessCategory::MissMshrFull,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The request could not be accepted and must be retried (or dropped).
    pub fn is_stall(self) -> bool {
        matches!(self, AccessCategory::HitMshrFull | AccessCategory::MissMshrFull)
    }

    pub fn is_miss(self) -> bool {
        matches!(self, AccessCategory::HitMshrMerged | AccessCategory::MissMshrAvailable)
    }
}

impl fmt::Display for AccessCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessCategory::Hit => "hit",
            AccessCategory::HitMshrMerged => "hit-mshr-merged",
            AccessCategory::HitMshrFull => "hit-mshr-full",
            AccessCategory::MissMshrAvailable => "miss-mshr-available",
            AccessCategory::MissMshrFull => "miss-mshr-full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub category: AccessCategory,
    /// Known only for hits; misses complete when their fill arrives.
    pub completion_cycle: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MshrEntry<S> {
    pub sector: u64,
    pub subscribers: Vec<S>,
    pub prefetch_only: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub demand: [u64; 5],
    pub prefetch: [u64; 5],
    pub prefetched_blocks: u64,
    pub prefetched_used: u64,
    pub unused_prefetch_evictions: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub writes: u64,
}

impl CacheStats {
    pub fn demand_accesses(&self) -> u64 {
        self.demand_hits() + self.demand_misses()
    }

    pub fn demand_hits(&self) -> u64 {
        self.demand[AccessCategory::Hit.index()]
    }

    pub fn demand_misses(&self) -> u64 {
        self.demand[AccessCategory::HitMshrMerged.index()]
            + self.demand[AccessCategory::MissMshrAvailable.index()]
    }

    pub fn prefetch_requests(&self) -> u64 {
        self.prefetch.iter().sum()
    }

    /// Accesses that allocated an MSHR and went to the next level.
    pub fn forwarded(&self) -> u64 {
        self.demand[AccessCategory::MissMshrAvailable.index()]
            + self.prefetch[AccessCategory::MissMshrAvailable.index()]
    }

    /// Non-stalled accesses of either kind.
    pub fn accepted(&self) -> u64 {
        AccessCategory::ALL
            .iter()
            .filter(|c| !c.is_stall())
            .map(|c| self.demand[c.index()] + self.prefetch[c.index()])
            .sum()
    }

    pub fn merge(&mut self, other: &CacheStats) {
        for i in 0..5 {
            self.demand[i] += other.demand[i];
            self.prefetch[i] += other.prefetch[i];
        }
        self.prefetched_blocks += other.prefetched_blocks;
        self.prefetched_used += other.prefetched_used;
        self.unused_prefetch_evictions += other.unused_prefetch_evictions;
        self.evictions += other.evictions;
        self.writebacks += other.writebacks;
        self.writes += other.writes;
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Line {
    tag: u64,
    valid: u8,
    prefetched: u8,
    dirty: u8,
    last_use: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Eviction {
    pub line_addr: u64,
    pub dirty_sectors: u32,
    pub unused_prefetch_sectors: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FillResult<S> {
    pub subscribers: Vec<S>,
    pub eviction: Option<Eviction>,
}

/// Sector cache with LRU replacement and a per-sector MSHR table.
#[derive(Debug, Clone)]
pub struct Cache<S> {
    config: CacheConfig,
    sets: Vec<Vec<Line>>,
    index: HashMap<u64, (usize, usize)>,
    mshrs: HashMap<u64, MshrEntry<S>>,
    clock: u64,
    pub stats: CacheStats,
}

impl<S> Cache<S> {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            sets: vec![Vec::new(); config.sets()],
            index: HashMap::new(),
            mshrs: HashMap::new(),
            clock: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn line_of(sector: u64) -> (u64, u8) {
        let line = sector & !(LINE_SIZE - 1);
        let bit = 1u8 << ((sector - line) / SECTOR_SIZE);
        (line, bit)
    }

    fn set_of(&self, line: u64) -> usize {
        ((line / LINE_SIZE) % self.sets.len() as u64) as usize
    }

    fn check_aligned(sector: u64) -> Result<()> {
        if !sector.is_multiple_of(SECTOR_SIZE) {
            return Err(Error::UnalignedAccess(sector));
        }
        Ok(())
    }

    fn touch(&mut self, set: usize, way: usize) {
        self.clock += 1;
        self.sets[set][way].last_use = self.clock;
    }

    /// True when the sector is present and valid.
    pub fn probe(&self, sector: u64) -> bool {
        let (line, bit) = Self::line_of(sector);
        self.index
            .get(&line)
            .is_some_and(|&(s, w)| self.sets[s][w].valid & bit != 0)
    }

    pub fn mshr(&self, sector: u64) -> Option<&MshrEntry<S>> {
        self.mshrs.get(&sector)
    }

    pub fn outstanding(&self) -> usize {
        self.mshrs.len()
    }

    pub fn resident_lines(&self) -> usize {
        self.index.len()
    }

    /// Looks up `sector`, merging into or allocating an MSHR on a miss. A
    /// `None` subscriber (an L1 prefetch) needs no merge slot.
    pub fn access(
        &mut self,
        sector: u64,
        kind: AccessKind,
        subscriber: Option<S>,
    ) -> Result<AccessCategory> {
        Self::check_aligned(sector)?;
        let category = self.classify(sector, kind, subscriber);
        match kind {
            AccessKind::Demand => self.stats.demand[category.index()] += 1,
            AccessKind::Prefetch => self.stats.prefetch[category.index()] += 1,
        }
        Ok(category)
    }

    fn classify(&mut self, sector: u64, kind: AccessKind, subscriber: Option<S>) -> AccessCategory {
        let (line, bit) = Self::line_of(sector);
        if let Some(&(s, w)) = self.index.get(&line) {
            if self.sets[s][w].valid & bit != 0 {
                if kind == AccessKind::Demand {
                    let l = &mut self.sets[s][w];
                    if l.prefetched & bit != 0 {
                        l.prefetched &= !bit;
                        self.stats.prefetched_used += 1;
                    }
                    self.touch(s, w);
                }
                return AccessCategory::Hit;
            }
        }
        let merge_capacity = self.config.mshr_merge_capacity;
        if let Some(entry) = self.mshrs.get_mut(&sector) {
            if let Some(sub) = subscriber {
                if entry.subscribers.len() >= merge_capacity {
                    return AccessCategory::HitMshrFull;
                }
                entry.subscribers.push(sub);
            }
            if kind == AccessKind::Demand && entry.prefetch_only {
                entry.prefetch_only = false;
                self.stats.prefetched_used += 1;
            }
            return AccessCategory::HitMshrMerged;
        }
        if self.mshrs.len() >= self.config.mshr_entries {
            return AccessCategory::MissMshrFull;
        }
        let prefetch_only = kind == AccessKind::Prefetch;
        if prefetch_only {
            self.stats.prefetched_blocks += 1;
        }
        self.mshrs.insert(
            sector,
            MshrEntry {
                sector,
                subscribers: subscriber.into_iter().collect(),
                prefetch_only,
            },
        );
        AccessCategory::MissMshrAvailable
    }

    /// Installs the sector, releases its MSHR entry, and returns everyone
    /// waiting on it.
    pub fn fill(&mut self, sector: u64) -> Result<FillResult<S>> {
        Self::check_aligned(sector)?;
        let entry = self
            .mshrs
            .remove(&sector)
            .ok_or(Error::FillWithoutMshr(sector))?;
        let (set, way, eviction) = self.allocate(sector);
        let (_, bit) = Self::line_of(sector);
        let line = &mut self.sets[set][way];
        line.valid |= bit;
        if entry.prefetch_only {
            line.prefetched |= bit;
        } else {
            line.prefetched &= !bit;
        }
        self.touch(set, way);
        Ok(FillResult {
            subscribers: entry.subscribers,
            eviction,
        })
    }

    /// Installs the sector without an MSHR round trip (perfect-mode hits).
    pub fn install(&mut self, sector: u64) -> Option<Eviction> {
        let (set, way, eviction) = self.allocate(sector);
        let (_, bit) = Self::line_of(sector);
        let line = &mut self.sets[set][way];
        line.valid |= bit;
        line.prefetched &= !bit;
        self.touch(set, way);
        eviction
    }

    /// Full-sector store: marks the sector valid and dirty, allocating
    /// without a fetch.
    pub fn write_sector(&mut self, sector: u64) -> Result<Option<Eviction>> {
        Self::check_aligned(sector)?;
        self.stats.writes += 1;
        let (set, way, eviction) = self.allocate(sector);
        let (_, bit) = Self::line_of(sector);
        let line = &mut self.sets[set][way];
        line.valid |= bit;
        line.dirty |= bit;
        line.prefetched &= !bit;
        self.touch(set, way);
        Ok(eviction)
    }

    // Finds the line holding `sector`, allocating (and possibly evicting the
    // LRU line of the set) when absent.
    fn allocate(&mut self, sector: u64) -> (usize, usize, Option<Eviction>) {
        let (line_addr, _) = Self::line_of(sector);
        if let Some(&(s, w)) = self.index.get(&line_addr) {
            return (s, w, None);
        }
        let set = self.set_of(line_addr);
        let ways = self.config.ways();
        let fresh = Line {
            tag: line_addr,
            ..Line::default()
        };
        if self.sets[set].len() < ways {
            self.sets[set].push(fresh);
            let way = self.sets[set].len() - 1;
            self.index.insert(line_addr, (set, way));
            return (set, way, None);
        }
        let way = self.sets[set]
            .iter()
            .enumerate()
            .min_by_key(|(_, l)| l.last_use)
            .map(|(w, _)| w)
            .expect("set has at least one way");
        let victim = self.sets[set][way];
        self.index.remove(&victim.tag);
        let eviction = Eviction {
            line_addr: victim.tag,
            dirty_sectors: (victim.dirty & victim.valid).count_ones(),
            unused_prefetch_sectors: (victim.prefetched & victim.valid).count_ones(),
        };
        self.stats.evictions += 1;
        self.stats.unused_prefetch_evictions += u64::from(eviction.unused_prefetch_sectors);
        self.stats.writebacks += u64::from(eviction.dirty_sectors);
        self.sets[set][way] = fresh;
        self.index.insert(line_addr, (set, way));
        (set, way, Some(eviction))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DramRequest {
    sector: u64,
    write: bool,
}

/// Bank-less DRAM: a FIFO drained at most `accept_per_cycle` requests per
/// cycle, each completing a fixed latency after acceptance.
#[derive(Debug, Clone)]
pub struct Dram {
    config: DramConfig,
    fifo: VecDeque<DramRequest>,
    accepted: Vec<(u64, u32)>,
    pub reads: u64,
    pub writebacks: u64,
}

impl Dram {
    pub fn new(config: DramConfig) -> Self {
        Self {
            config,
            fifo: VecDeque::new(),
            accepted: Vec::new(),
            reads: 0,
            writebacks: 0,
        }
    }

    pub fn config(&self) -> &DramConfig {
        &self.config
    }

    fn enqueue_read(&mut self, sector: u64) {
        self.reads += 1;
        self.fifo.push_back(DramRequest { sector, write: false });
    }

    fn enqueue_writeback(&mut self, sector: u64) {
        self.writebacks += 1;
        self.fifo.push_back(DramRequest { sector, write: true });
    }

    fn accept(&mut self, cycle: u64) -> Vec<DramRequest> {
        let n = (self.config.accept_per_cycle as usize).min(self.fifo.len());
        if n == 0 {
            return Vec::new();
        }
        self.accepted.push((cycle, n as u32));
        self.fifo.drain(..n).collect()
    }

    pub fn pending(&self) -> usize {
        self.fifo.len()
    }

    pub fn total_accepted(&self) -> u64 {
        self.accepted.iter().map(|&(_, n)| u64::from(n)).sum()
    }

    /// Accepted requests over `[from, to)` divided by the cap times the window.
    pub fn bandwidth_utilization(&self, from: u64, to: u64) -> f64 {
        let window = to.saturating_sub(from);
        if window == 0 {
            return 0.0;
        }
        let used: u64 = self
            .accepted
            .iter()
            .filter(|&&(c, _)| c >= from && c < to)
            .map(|&(_, n)| u64::from(n))
            .sum();
        used as f64 / (f64::from(self.config.accept_per_cycle) * window as f64)
    }
}

/// Identifier of a demand request waiting in an L1 MSHR.
pub type ReqId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2Subscriber {
    pub sm: usize,
    pub kind: AccessKind,
}

/// A demand request whose data has arrived at its SM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub sm: usize,
    pub req: ReqId,
    pub cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    L1Respond { sm: usize, req: ReqId },
    L2Arrive { sm: usize, sector: u64, kind: AccessKind, class: u8 },
    L2Respond { sm: usize, sector: u64 },
    DramArrive { sector: u64 },
    DramDone { sector: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pending {
    cycle: u64,
    seq: u64,
    event: Event,
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.cycle, self.seq).cmp(&(other.cycle, other.seq))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemConfig {
    pub l1: CacheConfig,
    pub l2: CacheConfig,
    pub dram: DramConfig,
}

impl Default for MemConfig {
    fn default() -> Self {
        Self {
            l1: CacheConfig::l1_default(),
            l2: CacheConfig::l2_default(),
            dram: DramConfig::default(),
        }
    }
}

/// Number of pop-streak classes (1, 2, 3, 4+).
pub const STREAK_CLASSES: usize = 4;

pub struct MemoryHierarchy {
    config: MemConfig,
    l1: Vec<Cache<ReqId>>,
    l2: Cache<L2Subscriber>,
    dram: Dram,
    events: BinaryHeap<Reverse<Pending>>,
    seq: u64,
    now: u64,
    completions: Vec<Completion>,
    /// Demand L2 misses that went to DRAM, by pop-streak class of the
    /// originating pop.
    pub dram_demand_misses_by_class: [u64; STREAK_CLASSES],
    /// Every L2 lookup, stalled retries included.
    pub l2_attempts: u64,
}

impl MemoryHierarchy {
    pub fn new(config: MemConfig, sm_count: usize) -> Self {
        Self {
            config,
            l1: (0..sm_count).map(|_| Cache::new(config.l1)).collect(),
            l2: Cache::new(config.l2),
            dram: Dram::new(config.dram),
            events: BinaryHeap::new(),
            seq: 0,
            now: 0,
            completions: Vec::new(),
            dram_demand_misses_by_class: [0; STREAK_CLASSES],
            l2_attempts: 0,
        }
    }

    pub fn config(&self) -> &MemConfig {
        &self.config
    }

    pub fn l1(&self, sm: usize) -> &Cache<ReqId> {
        &self.l1[sm]
    }

    pub fn l2(&self) -> &Cache<L2Subscriber> {
        &self.l2
    }

    pub fn dram(&self) -> &Dram {
        &self.dram
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn l1_stats(&self) -> CacheStats {
        let mut total = CacheStats::default();
        for c in &self.l1 {
            total.merge(&c.stats);
        }
        total
    }

    fn schedule(&mut self, cycle: u64, event: Event) {
        self.seq += 1;
        self.events.push(Reverse(Pending {
            cycle,
            seq: self.seq,
            event,
        }));
    }

    /// Issues a sector request into an SM's L1 at `cycle`. Demand requests
    /// carry their request id and the pop-streak class (0-based) of the pop
    /// that created them.
    pub fn access(
        &mut self,
        sm: usize,
        sector: u64,
        kind: AccessKind,
        demand: Option<(ReqId, u8)>,
        cycle: u64,
    ) -> Result<AccessOutcome> {
        let category = self.l1[sm].access(sector, kind, demand.map(|(r, _)| r))?;
        let hit_latency = self.config.l1.hit_latency;
        let mut completion_cycle = None;
        match category {
            AccessCategory::Hit => {
                if let Some((req, _)) = demand {
                    self.schedule(cycle + hit_latency, Event::L1Respond { sm, req });
                }
                completion_cycle = Some(cycle + hit_latency);
            }
            AccessCategory::MissMshrAvailable => {
                let class = demand.map_or(0, |(_, c)| c);
                self.schedule(
                    cycle + hit_latency,
                    Event::L2Arrive {
                        sm,
                        sector,
                        kind,
                        class,
                    },
                );
            }
            _ => {}
        }
        Ok(AccessOutcome {
            category,
            completion_cycle,
        })
    }

    /// Perfect-mode demand read: completes at L1 hit latency and leaves the
    /// sector resident, with no traffic below L1.
    pub fn force_hit(&mut self, sm: usize, sector: u64, req: ReqId, cycle: u64) -> Result<AccessOutcome> {
        Cache::<ReqId>::check_aligned(sector)?;
        let l1 = &mut self.l1[sm];
        l1.stats.demand[AccessCategory::Hit.index()] += 1;
        l1.install(sector);
        let done = cycle + self.config.l1.hit_latency;
        self.schedule(done, Event::L1Respond { sm, req });
        Ok(AccessOutcome {
            category: AccessCategory::Hit,
            completion_cycle: Some(done),
        })
    }

    /// Stores a sector through L1 (write-through, no allocate) into L2.
    pub fn store(&mut self, sector: u64) -> Result<()> {
        if let Some(ev) = self.l2.write_sector(sector)? {
            self.writeback(ev);
        }
        Ok(())
    }

    fn writeback(&mut self, ev: Eviction) {
        for _ in 0..ev.dirty_sectors {
            self.dram.enqueue_writeback(ev.line_addr);
        }
    }

    /// Processes everything due at `cycle`. Cycles must be non-decreasing.
    pub fn advance(&mut self, cycle: u64) -> Result<()> {
        debug_assert!(cycle >= self.now, "time went backwards");
        self.now = cycle;
        while let Some(Reverse(top)) = self.events.peek() {
            if top.cycle > cycle {
                break;
            }
            let Reverse(p) = self.events.pop().unwrap();
            self.handle(p.event, cycle)?;
        }
        for req in self.dram.accept(cycle) {
            if !req.write {
                self.schedule(cycle + self.config.dram.latency, Event::DramDone { sector: req.sector });
            }
        }
        Ok(())
    }

    fn handle(&mut self, event: Event, cycle: u64) -> Result<()> {
        match event {
            Event::L1Respond { sm, req } => self.completions.push(Completion { sm, req, cycle }),
            Event::L2Arrive {
                sm,
                sector,
                kind,
                class,
            } => {
                self.l2_attempts += 1;
                let category = self.l2.access(sector, kind, Some(L2Subscriber { sm, kind }))?;
                let latency = self.config.l2.hit_latency;
                match category {
                    AccessCategory::Hit => {
                        self.schedule(cycle + latency, Event::L2Respond { sm, sector })
                    }
                    AccessCategory::MissMshrAvailable => {
                        if kind == AccessKind::Demand {
                            self.dram_demand_misses_by_class[class as usize] += 1;
                        }
                        self.schedule(cycle + latency, Event::DramArrive { sector });
                    }
                    AccessCategory::HitMshrMerged => {}
                    // The L1 already holds an MSHR for this sector, so L2
                    // stalls retry rather than drop.
                    AccessCategory::HitMshrFull | AccessCategory::MissMshrFull => self.schedule(
                        cycle + 1,
                        Event::L2Arrive {
                            sm,
                            sector,
                            kind,
                            class,
                        },
                    ),
                }
            }
            Event::L2Respond { sm, sector } => self.fill_l1(sm, sector, cycle)?,
            Event::DramArrive { sector } => self.dram.enqueue_read(sector),
            Event::DramDone { sector } => {
                let fill = self.l2.fill(sector)?;
                if let Some(ev) = fill.eviction {
                    self.writeback(ev);
                }
                for sub in fill.subscribers {
                    self.fill_l1(sub.sm, sector, cycle)?;
                }
            }
        }
        Ok(())
    }

    fn fill_l1(&mut self, sm: usize, sector: u64, cycle: u64) -> Result<()> {
        let fill = self.l1[sm].fill(sector)?;
        for req in fill.subscribers {
            self.completions.push(Completion { sm, req, cycle });
        }
        Ok(())
    }

    pub fn drain_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completions)
    }

    /// Earliest cycle at which `advance` would change anything.
    pub fn next_activity(&self) -> Option<u64> {
        let event = self.events.peek().map(|Reverse(p)| p.cycle);
        if self.dram.pending() > 0 {
            return Some(event.map_or(self.now + 1, |e| e.min(self.now + 1)));
        }
        event
    }

    pub fn is_quiescent(&self) -> bool {
        self.events.is_empty() && self.dram.pending() == 0 && self.completions.is_empty()
    }

    /// Counter identities that must hold at every quiescent point:
    /// L1 forwards = L2 accepted accesses, L2 forwards = DRAM reads, and the
    /// per-class DRAM miss histogram sums to the L2 demand forwards.
    pub fn check_conservation(&self) -> std::result::Result<(), String> {
        let l1 = self.l1_stats();
        let l2 = &self.l2.stats;
        if l1.forwarded() != l2.accepted() {
            return Err(format!(
                "L1 forwarded {} != L2 accesses {}",
                l1.forwarded(),
                l2.accepted()
            ));
        }
        if l2.forwarded() != self.dram.reads {
            return Err(format!(
                "L2 forwarded {} != DRAM reads {}",
                l2.forwarded(),
                self.dram.reads
            ));
        }
        let hist: u64 = self.dram_demand_misses_by_class.iter().sum();
        if hist != l2.demand[AccessCategory::MissMshrAvailable.index()] {
            return Err(format!(
                "DRAM miss histogram {} != L2 demand forwards {}",
                hist,
                l2.demand[AccessCategory::MissMshrAvailable.index()]
            ));
        }
        Ok(())
    }
}
