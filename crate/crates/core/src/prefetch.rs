//! Prefetch generation for the ray-tracing unit.
//!
//! * `ttp-dfs`: a per-thread pop-streak state machine plus a prefetch cursor
//!   into the traversal stack. Pushes reset the machine; each pop widens the
//!   window of stack entries (below the top) that are prefetched.
//! * `ttp-bfs`: every queue pop prefetches up to `N` entries from the head.
//! * `park-leaf`: while a leaf test runs, prefetch one stack entry per test
//!   cycle.
//! * `perfect-upward` / `perfect-downward`: limit modes that force L1 hits for
//!   2nd+ pops or 1st pops of a streak.
//!
//! Everything here is pure bookkeeping over stack contents; the simulator
//! turns emitted node addresses into sector requests and arbitrates them
//! against demand reads.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrefetchPolicy {
    Off,
    TtpDfs,
    TtpBfs,
    ParkLeaf,
    PerfectUpward,
    PerfectDownward,
}

impl PrefetchPolicy {
    pub const ALL: [PrefetchPolicy; 6] = [
        PrefetchPolicy::Off,
        PrefetchPolicy::TtpDfs,
        PrefetchPolicy::TtpBfs,
        PrefetchPolicy::ParkLeaf,
        PrefetchPolicy::PerfectUpward,
        PrefetchPolicy::PerfectDownward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrefetchPolicy::Off => "off",
            PrefetchPolicy::TtpDfs => "ttp-dfs",
            PrefetchPolicy::TtpBfs => "ttp-bfs",
            PrefetchPolicy::ParkLeaf => "park-leaf",
            PrefetchPolicy::PerfectUpward => "perfect-upward",
            PrefetchPolicy::PerfectDownward => "perfect-downward",
        }
    }

    pub fn perfect_mode(self) -> Option<PerfectMode> {
        match self {
            PrefetchPolicy::PerfectUpward => Some(PerfectMode::Upward),
            PrefetchPolicy::PerfectDownward => Some(PerfectMode::Downward),
            _ => None,
        }
    }
}

impl fmt::Display for PrefetchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrefetchPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PrefetchPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

/// Prefetch counts for the 1st, 2nd and 3rd+ pop after a push.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intensity {
    pub first: usize,
    pub second: usize,
    pub streak: usize,
}

impl Default for Intensity {
    fn default() -> Self {
        Self {
            first: 1,
            second: 2,
            streak: 16,
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.first, self.second, self.streak)
    }
}

impl FromStr for Intensity {
    type Err = String;

    /// Accepts `a/b/c` or `a,b,c`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(['/', ',', ':']).map(str::trim).collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(format!("intensity {s:?} needs three counts"));
        };
        let parse = |t: &str| -> Result<usize, String> {
            match t.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(format!("bad intensity count {t:?}")),
            }
        };
        Ok(Intensity {
            first: parse(a)?,
            second: parse(b)?,
            streak: parse(c)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arbitration {
    /// Prefetches issue only on cycles without a demand request.
    DemandPriority,
    /// Prefetches win if at least this many cycles passed since the last one.
    Threshold(u64),
}

impl fmt::Display for Arbitration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arbitration::DemandPriority => f.write_str("demand-priority"),
            Arbitration::Threshold(c) => write!(f, "threshold-{c}"),
        }
    }
}

impl FromStr for Arbitration {
    type Err = String;

    /// `demand-priority`, a bare cycle count, or `threshold-<c>` / `threshold(<c>)`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "demand-priority" {
            return Ok(Arbitration::DemandPriority);
        }
        let digits = s
            .strip_prefix("threshold-")
            .or_else(|| s.strip_prefix("threshold(").and_then(|r| r.strip_suffix(')')))
            .unwrap_or(s);
        match digits.parse::<u64>() {
            Ok(c) if c >= 1 => Ok(Arbitration::Threshold(c)),
            _ => Err(format!("unknown arbitration {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchPolicyConfig {
    pub policy: PrefetchPolicy,
    pub bfs_distance: usize,
    pub intensity: Intensity,
    pub arbitration: Arbitration,
    /// Per-thread prefetch queue capacity in 32B chunks.
    pub queue_capacity: usize,
}

impl Default for PrefetchPolicyConfig {
    fn default() -> Self {
        Self {
            policy: PrefetchPolicy::Off,
            bfs_distance: 4,
            intensity: Intensity::default(),
            arbitration: Arbitration::DemandPriority,
            queue_capacity: 32,
        }
    }
}

/// Pop-streak state, two bits per thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FsmState {
    /// Last stack event was a push (or nothing yet).
    #[default]
    Idle,
    /// First pop after a push.
    S1,
    /// Second consecutive pop.
    S2,
    /// Third or later consecutive pop.
    S3,
}

impl FsmState {
    pub fn bits(self) -> u8 {
        match self {
            FsmState::Idle => 0b00,
            FsmState::S1 => 0b01,
            FsmState::S2 => 0b10,
            FsmState::S3 => 0b11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TtpFsm {
    pub state: FsmState,
    pub intensity: Intensity,
}

impl TtpFsm {
    pub fn new(intensity: Intensity) -> Self {
        Self {
            state: FsmState::Idle,
            intensity,
        }
    }

    pub fn on_push(&mut self) {
        self.state = FsmState::Idle;
    }

    /// Advances on a pop and returns the prefetch distance `k` for the new state.
    pub fn on_pop(&mut self) -> usize {
        self.state = match self.state {
            FsmState::Idle => FsmState::S1,
            FsmState::S1 => FsmState::S2,
            FsmState::S2 | FsmState::S3 => FsmState::S3,
        };
        self.distance()
    }

    pub fn distance(&self) -> usize {
        match self.state {
            FsmState::Idle => 0,
            FsmState::S1 => self.intensity.first,
            FsmState::S2 => self.intensity.second,
            FsmState::S3 => self.intensity.streak,
        }
    }
}

/// Index of the next stack entry to prefetch. Index 0 is the bottom of the
/// stack. Entries above the cursor were already prefetched since the last
/// push; the cursor only moves back up on a push.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrefetchCursor {
    next: isize,
}

impl PrefetchCursor {
    pub fn reset_to_top(&mut self, stack_len: usize) {
        self.next = stack_len as isize - 1;
    }

    pub fn position(&self) -> isize {
        self.next
    }

    /// Emits entries from the cursor downward until it reaches `T - k`, where
    /// `T` is the current top index. Never re-emits entries above the cursor.
    pub fn advance<S: StackView + ?Sized>(&mut self, stack: &S, k: usize) -> Vec<u64> {
        self.advance_bounded(stack, k, usize::MAX)
    }

    /// Like [`Self::advance`] but emits at most `max` entries, leaving the
    /// rest of the window for later calls.
    pub fn advance_bounded<S: StackView + ?Sized>(&mut self, stack: &S, k: usize, max: usize) -> Vec<u64> {
        let top = stack.len() as isize - 1;
        let target = top - k as isize;
        self.next = self.next.min(top);
        let mut out = Vec::new();
        while self.next > target && self.next >= 0 && out.len() < max {
            out.push(stack.entry(self.next as usize));
            self.next -= 1;
        }
        out
    }
}

/// Read access to a traversal stack, bottom at index 0.
pub trait StackView {
    fn len(&self) -> usize;
    fn entry(&self, index: usize) -> u64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl StackView for [u64] {
    fn len(&self) -> usize {
        <[u64]>::len(self)
    }
    fn entry(&self, index: usize) -> u64 {
        self[index]
    }
}

impl StackView for Vec<u64> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn entry(&self, index: usize) -> u64 {
        self[index]
    }
}

impl StackView for VecDeque<u64> {
    fn len(&self) -> usize {
        VecDeque::len(self)
    }
    fn entry(&self, index: usize) -> u64 {
        self[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackOp {
    Push,
    Pop,
}

/// DFS prefetch generation. `stack` is the content after the event.
pub fn on_stack_event<S: StackView + ?Sized>(
    fsm: &mut TtpFsm,
    cursor: &mut PrefetchCursor,
    op: StackOp,
    stack: &S,
) -> Vec<u64> {
    match op {
        StackOp::Push => {
            fsm.on_push();
            cursor.reset_to_top(stack.len());
            Vec::new()
        }
        StackOp::Pop => {
            let k = fsm.on_pop();
            cursor.advance(stack, k)
        }
    }
}

/// Leaf-overlap prefetching: up to one stack entry per cycle of the leaf test,
/// starting at the top, never repeating since the last push.
pub fn on_leaf_test_start<S: StackView + ?Sized>(
    cursor: &mut PrefetchCursor,
    stack: &S,
    duration: u64,
) -> Vec<u64> {
    cursor.advance(stack, duration as usize)
}

/// BFS queue lookahead state: addresses already prefetched and still queued.
#[derive(Debug, Clone, Default)]
pub struct QueueLookahead {
    emitted: HashSet<u64>,
}

impl QueueLookahead {
    /// Call after `popped` left the head of `queue` (head at index 0).
    pub fn on_queue_pop(&mut self, popped: u64, queue: &VecDeque<u64>, distance: usize) -> Vec<u64> {
        self.emitted.remove(&popped);
        let mut out = Vec::new();
        for &addr in queue.iter().take(distance) {
            if self.emitted.insert(addr) {
                out.push(addr);
            }
        }
        out
    }

    pub fn clear(&mut self) {
        self.emitted.clear();
    }
}

/// Per-thread prefetch engine state.
#[derive(Debug, Clone, Default)]
pub struct ThreadPrefetcher {
    pub fsm: TtpFsm,
    pub cursor: PrefetchCursor,
    pub lookahead: QueueLookahead,
}

impl ThreadPrefetcher {
    pub fn new(intensity: Intensity) -> Self {
        Self {
            fsm: TtpFsm::new(intensity),
            cursor: PrefetchCursor::default(),
            lookahead: QueueLookahead::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueChoice {
    Demand,
    Prefetch,
}

/// Picks which queue feeds the single memory port this cycle.
pub fn arbitrate(
    demand_pending: bool,
    prefetch_pending: bool,
    arbitration: Arbitration,
    cycle: u64,
    last_prefetch_cycle: Option<u64>,
) -> Option<IssueChoice> {
    match (demand_pending, prefetch_pending) {
        (false, false) => None,
        (true, false) => Some(IssueChoice::Demand),
        (false, true) => Some(IssueChoice::Prefetch),
        (true, true) => match arbitration {
            Arbitration::DemandPriority => Some(IssueChoice::Demand),
            Arbitration::Threshold(c) => {
                let overdue = last_prefetch_cycle.is_none_or(|last| cycle.saturating_sub(last) >= c);
                Some(if overdue {
                    IssueChoice::Prefetch
                } else {
                    IssueChoice::Demand
                })
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerfectMode {
    /// 2nd and later pops of a streak always hit in L1.
    Upward,
    /// 1st pops after a push always hit in L1.
    Downward,
}

/// Whether a demand read issued by a pop at `pop_streak` position is forced
/// to hit in L1.
pub fn apply_perfect_mode(mode: PerfectMode, pop_streak: u32) -> bool {
    match mode {
        PerfectMode::Upward => pop_streak >= 2,
        PerfectMode::Downward => pop_streak == 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(ops: &[(StackOp, Option<u64>)]) -> Vec<Vec<u64>> {
        let mut fsm = TtpFsm::new(Intensity::default());
        let mut cursor = PrefetchCursor::default();
        let mut stack: Vec<u64> = Vec::new();
        ops.iter()
            .map(|&(op, addr)| {
                match op {
                    StackOp::Push => stack.push(addr.unwrap()),
                    StackOp::Pop => {
                        stack.pop();
                    }
                }
                on_stack_event(&mut fsm, &mut cursor, op, &stack)
            })
            .collect()
    }

    #[test]
    fn first_pop_prefetches_top() {
        let out = run(&[
            (StackOp::Push, Some(10)),
            (StackOp::Push, Some(20)),
            (StackOp::Pop, None),
        ]);
        assert_eq!(out, vec![vec![], vec![], vec![10]]);
    }

    #[test]
    fn streak_clamped_to_depth() {
        let mut ops: Vec<(StackOp, Option<u64>)> =
            (1..=5).map(|a| (StackOp::Push, Some(a))).collect();
        ops.push((StackOp::Push, Some(6)));
        ops.extend([(StackOp::Pop, None); 3]);
        let out = run(&ops);
        // stack after pops: [1..5], [1..4], [1..3]
        assert_eq!(out[6], vec![5]);
        assert_eq!(out[7], vec![4, 3]);
        assert_eq!(out[8], vec![2, 1]);
    }

    #[test]
    fn fsm_bits() {
        let mut fsm = TtpFsm::default();
        assert_eq!(fsm.state.bits(), 0);
        assert_eq!(fsm.distance(), 0);
        assert_eq!(fsm.on_pop(), 1);
        assert_eq!(fsm.on_pop(), 2);
        assert_eq!(fsm.on_pop(), 16);
        assert_eq!(fsm.on_pop(), 16);
        assert_eq!(fsm.state.bits(), 0b11);
    }

    #[test]
    fn queue_lookahead() {
        let mut la = QueueLookahead::default();
        let q: VecDeque<u64> = [4, 5, 6].into_iter().collect();
        assert_eq!(la.on_queue_pop(2, &q, 2), vec![4, 5]);
        let q: VecDeque<u64> = [5, 6].into_iter().collect();
        assert_eq!(la.on_queue_pop(4, &q, 2), vec![6]);
        assert!(la.on_queue_pop(9, &VecDeque::new(), 4).is_empty());
        let q: VecDeque<u64> = [7, 8].into_iter().collect();
        assert_eq!(la.on_queue_pop(5, &q, 4).len(), 2);
    }

    #[test]
    fn leaf_window() {
        let stack: Vec<u64> = vec![1, 2, 3, 4, 5];
        let mut cursor = PrefetchCursor::default();
        cursor.reset_to_top(6);
        assert_eq!(on_leaf_test_start(&mut cursor, &stack, 8), vec![5, 4, 3, 2, 1]);
        assert!(on_leaf_test_start(&mut cursor, &stack, 8).is_empty());
        let mut cursor = PrefetchCursor::default();
        cursor.reset_to_top(1);
        assert!(on_leaf_test_start(&mut cursor, &Vec::<u64>::new(), 8).is_empty());
    }

    #[test]
    fn arbitration_modes() {
        use IssueChoice::*;
        assert_eq!(arbitrate(true, true, Arbitration::DemandPriority, 100, Some(0)), Some(Demand));
        assert_eq!(arbitrate(true, true, Arbitration::Threshold(25), 30, Some(0)), Some(Prefetch));
        assert_eq!(arbitrate(true, true, Arbitration::Threshold(25), 20, Some(0)), Some(Demand));
        for arb in [Arbitration::DemandPriority, Arbitration::Threshold(50)] {
            assert_eq!(arbitrate(false, true, arb, 1, Some(0)), Some(Prefetch));
            assert_eq!(arbitrate(false, false, arb, 1, Some(0)), None);
        }
    }

    #[test]
    fn perfect_modes() {
        assert!(apply_perfect_mode(PerfectMode::Upward, 2));
        assert!(apply_perfect_mode(PerfectMode::Upward, 7));
        assert!(!apply_perfect_mode(PerfectMode::Upward, 1));
        assert!(apply_perfect_mode(PerfectMode::Downward, 1));
        assert!(!apply_perfect_mode(PerfectMode::Downward, 2));
    }

    #[test]
    fn parse_names() {
        assert_eq!("ttp-dfs".parse::<PrefetchPolicy>(), Ok(PrefetchPolicy::TtpDfs));
        assert!("warp-speed".parse::<PrefetchPolicy>().unwrap_err().contains("unknown policy"));
        assert_eq!("25".parse::<Arbitration>(), Ok(Arbitration::Threshold(25)));
        assert_eq!("threshold(50)".parse::<Arbitration>(), Ok(Arbitration::Threshold(50)));
        assert_eq!("threshold-100".parse::<Arbitration>(), Ok(Arbitration::Threshold(100)));
        assert!("0".parse::<Arbitration>().is_err());
        assert_eq!("1/2/16".parse::<Intensity>(), Ok(Intensity::default()));
        assert!("1/0/16".parse::<Intensity>().is_err());
    }
}
