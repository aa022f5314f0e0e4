use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use ttpsim::prefetch::{
    on_leaf_test_start, on_stack_event, FsmState, PrefetchCursor, QueueLookahead, StackOp, TtpFsm,
};
use ttpsim::Intensity;

fn intensity() -> impl Strategy<Value = Intensity> {
    (1usize..4, 1usize..6, 1usize..24).prop_map(|(first, second, streak)| Intensity {
        first,
        second,
        streak,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// Emissions come from the live stack, never repeat between pushes, and
    /// stay within the current window.
    #[test]
    fn dfs_emissions_are_bounded_and_unique(
        intensity in intensity(),
        ops in prop::collection::vec(any::<bool>(), 1..300),
    ) {
        let mut fsm = TtpFsm::new(intensity);
        let mut cursor = PrefetchCursor::default();
        let mut stack: Vec<u64> = Vec::new();
        let mut since_push: HashSet<u64> = HashSet::new();
        let mut next = 0u64;
        for push in ops {
            if push || stack.is_empty() {
                stack.push(next);
                next += 1;
                let out = on_stack_event(&mut fsm, &mut cursor, StackOp::Push, &stack);
                prop_assert!(out.is_empty());
                prop_assert_eq!(fsm.state, FsmState::Idle);
                since_push.clear();
            } else {
                stack.pop();
                let out = on_stack_event(&mut fsm, &mut cursor, StackOp::Pop, &stack);
                prop_assert!(out.len() <= fsm.distance());
                let window: HashSet<u64> =
                    stack.iter().rev().take(fsm.distance()).copied().collect();
                for a in out {
                    prop_assert!(window.contains(&a), "{} outside window", a);
                    prop_assert!(since_push.insert(a), "{} emitted twice", a);
                }
            }
        }
    }

    #[test]
    fn fsm_saturates_after_two_pops(pops in 1usize..40) {
        let mut fsm = TtpFsm::new(Intensity::default());
        let ks: Vec<usize> = (0..pops).map(|_| fsm.on_pop()).collect();
        for (i, k) in ks.iter().enumerate() {
            prop_assert_eq!(*k, [1, 2, 16][i.min(2)]);
        }
        fsm.on_push();
        prop_assert_eq!(fsm.on_pop(), 1);
    }

    #[test]
    fn leaf_window_emits_one_entry_per_cycle(
        depth in 0usize..40,
        duration in 0u64..20,
    ) {
        let stack: Vec<u64> = (0..depth as u64).collect();
        let mut cursor = PrefetchCursor::default();
        cursor.reset_to_top(stack.len());
        let first = on_leaf_test_start(&mut cursor, &stack, duration);
        prop_assert_eq!(first.len(), depth.min(duration as usize));
        let expected: Vec<u64> = stack.iter().rev().take(duration as usize).copied().collect();
        prop_assert_eq!(&first, &expected);
        // A second leaf without a push continues below the first window.
        let second = on_leaf_test_start(&mut cursor, &stack, duration);
        prop_assert!(second.iter().all(|a| !first.contains(a)));
    }

    #[test]
    fn lookahead_emits_queued_nodes_once(
        distance in 1usize..8,
        pushes in prop::collection::vec(0usize..4, 1..60),
    ) {
        let mut queue: VecDeque<u64> = VecDeque::from([0]);
        let mut look = QueueLookahead::default();
        let mut next = 1u64;
        let mut emitted: HashSet<u64> = HashSet::new();
        for n in pushes {
            let Some(head) = queue.pop_front() else { break };
            for _ in 0..n {
                queue.push_back(next);
                next += 1;
            }
            for a in look.on_queue_pop(head, &queue, distance) {
                prop_assert!(queue.iter().take(distance).any(|&q| q == a));
                prop_assert!(emitted.insert(a), "{} emitted twice", a);
            }
            // Everything within the lookahead distance has been covered.
            for q in queue.iter().take(distance) {
                prop_assert!(emitted.contains(q));
            }
        }
    }
}
