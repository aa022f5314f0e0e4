//! Run statistics and the derived prefetch metrics.

use crate::error::{Error, Result};
use crate::memhier::{AccessCategory, CacheStats, STREAK_CLASSES};
use crate::rtunit::{StackEvent, StackEventKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    L1,
    L2,
}

/// Everything one simulation run reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsLedger {
    pub cycles: u64,
    pub l1: CacheStats,
    pub l2: CacheStats,
    pub dram_reads: u64,
    pub dram_writebacks: u64,
    pub dram_bw_util: f64,
    /// Pops by position in their streak (1, 2, 3, 4+).
    pub pop_streak: [u64; STREAK_CLASSES],
    /// Demand L1 misses by the streak class of the pop that issued them.
    pub pop_streak_l1_miss: [u64; STREAK_CLASSES],
    /// Demand accesses that missed in both L1 and L2, by streak class.
    pub pop_streak_dram_miss: [u64; STREAK_CLASSES],
    /// Accesses presented to each level, counted at the issuing side.
    pub l1_attempts: u64,
    pub l2_attempts: u64,
    pub rays: u64,
    pub node_visits: u64,
    pub max_nodes_per_ray: u64,
}

impl StatsLedger {
    pub fn level(&self, level: Level) -> &CacheStats {
        match level {
            Level::L1 => &self.l1,
            Level::L2 => &self.l2,
        }
    }

    pub fn avg_nodes_per_ray(&self) -> f64 {
        if self.rays == 0 {
            0.0
        } else {
            self.node_visits as f64 / self.rays as f64
        }
    }

    /// Fraction of prefetched chunks later touched by a demand access.
    pub fn accuracy(&self, level: Level) -> Option<f64> {
        let s = self.level(level);
        (s.prefetched_blocks > 0).then(|| s.prefetched_used as f64 / s.prefetched_blocks as f64)
    }

    /// Fractional reduction of the baseline's demand misses.
    pub fn coverage(&self, baseline: &StatsLedger, level: Level) -> Result<Option<f64>> {
        if baseline.node_visits != self.node_visits {
            return Err(Error::WorkloadMismatch {
                baseline: baseline.node_visits,
                run: self.node_visits,
            });
        }
        let base = baseline.level(level).demand_misses();
        let run = self.level(level).demand_misses();
        Ok((base > 0).then(|| (base as f64 - run as f64) / base as f64))
    }

    /// Fraction of prefetch requests that missed with a free MSHR.
    pub fn efficiency(&self, level: Level) -> Option<f64> {
        let s = self.level(level);
        let total = s.prefetch_requests();
        (total > 0).then(|| s.prefetch[AccessCategory::MissMshrAvailable.index()] as f64 / total as f64)
    }

    /// Demand misses per thousand node visits.
    pub fn mpki(&self, level: Level) -> f64 {
        if self.node_visits == 0 {
            return 0.0;
        }
        1000.0 * self.level(level).demand_misses() as f64 / self.node_visits as f64
    }

    pub fn speedup_over(&self, baseline: &StatsLedger) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        baseline.cycles as f64 / self.cycles as f64
    }

    /// Fraction of the L1 demand misses issued by 2nd and later pops.
    pub fn upward_miss_fraction(&self) -> Option<f64> {
        let total: u64 = self.pop_streak_l1_miss.iter().sum();
        (total > 0).then(|| (total - self.pop_streak_l1_miss[0]) as f64 / total as f64)
    }

    /// Ledger-level identities every run must satisfy.
    pub fn check_identities(&self) -> std::result::Result<(), String> {
        for (name, s) in [("L1", &self.l1), ("L2", &self.l2)] {
            if s.prefetched_used > s.prefetched_blocks {
                return Err(format!(
                    "{name}: {} prefetched chunks used but only {} prefetched",
                    s.prefetched_used, s.prefetched_blocks
                ));
            }
            if s.demand_hits() + s.demand_misses() != s.demand_accesses() {
                return Err(format!("{name}: hits + misses != demand accesses"));
            }
        }
        for (name, s, attempts) in [("L1", &self.l1, self.l1_attempts), ("L2", &self.l2, self.l2_attempts)] {
            let categorized: u64 = s.demand.iter().chain(s.prefetch.iter()).sum();
            if categorized != attempts {
                return Err(format!(
                    "{name}: {categorized} categorized accesses but {attempts} issued"
                ));
            }
        }
        if self.l1.forwarded() != self.l2.accepted() {
            return Err(format!(
                "L1 forwarded {} != L2 accesses {}",
                self.l1.forwarded(),
                self.l2.accepted()
            ));
        }
        if self.l2.forwarded() != self.dram_reads {
            return Err(format!(
                "L2 forwarded {} != DRAM reads {}",
                self.l2.forwarded(),
                self.dram_reads
            ));
        }
        let pops: u64 = self.pop_streak.iter().sum();
        if pops != self.node_visits {
            return Err(format!("pop histogram {pops} != node visits {}", self.node_visits));
        }
        let l1: u64 = self.pop_streak_l1_miss.iter().sum();
        if l1 != self.l1.demand_misses() {
            return Err(format!(
                "L1 miss histogram {l1} != L1 demand misses {}",
                self.l1.demand_misses()
            ));
        }
        let dram: u64 = self.pop_streak_dram_miss.iter().sum();
        let l2_forwards = self.l2.demand[AccessCategory::MissMshrAvailable.index()];
        if dram != l2_forwards {
            return Err(format!("DRAM miss histogram {dram} != L2 demand forwards {l2_forwards}"));
        }
        Ok(())
    }
}

/// Streak class index (0 = 1st pop, 3 = 4th and later) for a streak position.
pub fn streak_class(pop_streak: u32) -> usize {
    (pop_streak.max(1) as usize).min(STREAK_CLASSES) - 1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PopStreakHistogram {
    pub all: [u64; STREAK_CLASSES],
    pub dram_miss: [u64; STREAK_CLASSES],
}

/// Classifies every pop by its position in the current streak of its thread.
/// `dram_miss` holds one flag per pop, in stream order.
pub fn pop_streak_histogram(events: &[StackEvent], dram_miss: &[bool]) -> PopStreakHistogram {
    let mut hist = PopStreakHistogram::default();
    let mut streaks: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    let mut pop_index = 0;
    for e in events {
        let streak = streaks.entry(e.thread_id).or_insert(0);
        match e.kind {
            StackEventKind::Push => *streak = 0,
            StackEventKind::Pop => {
                *streak += 1;
                let class = streak_class(*streak);
                hist.all[class] += 1;
                if dram_miss.get(pop_index).copied().unwrap_or(false) {
                    hist.dram_miss[class] += 1;
                }
                pop_index += 1;
            }
        }
    }
    hist
}
