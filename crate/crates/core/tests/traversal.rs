mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use ttpsim::bvh::build;
use ttpsim::intersect::brute_force_closest;
use ttpsim::rtunit::{traverse, write_trace, StackEventKind};
use ttpsim::scene::{generate_synthetic, SyntheticKind};
use ttpsim::{Ray, RtUnitConfig, TraversalOrder, Vec3};

fn kind() -> impl Strategy<Value = SyntheticKind> {
    prop_oneof![
        Just(SyntheticKind::Grid),
        Just(SyntheticKind::RandomBoxes),
        Just(SyntheticKind::DeepBranch)
    ]
}

fn ray_toward_scene() -> impl Strategy<Value = Ray> {
    (-12.0f32..12.0, -12.0f32..12.0, -12.0f32..12.0, -3.0f32..3.0, -3.0f32..3.0).prop_map(
        |(tx, ty, tz, ox, oy)| {
            let origin = Vec3::new(ox, oy, -40.0);
            Ray::new(origin, Vec3::new(tx, ty, tz) - origin)
        },
    )
}

fn same_hit(a: &ttpsim::HitRecord, b: &ttpsim::HitRecord) -> bool {
    a.hit == b.hit && (!a.hit || (a.primitive_id == b.primitive_id && a.t == b.t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dfs_and_bfs_agree_with_brute_force(
        kind in kind(),
        count in 8usize..300,
        seed in 0u64..1000,
        rays in prop::collection::vec(ray_toward_scene(), 1..16),
    ) {
        let tris = generate_synthetic(kind, count, seed);
        let bvh = build(&tris, 32).unwrap();
        let dfs = RtUnitConfig::default();
        let bfs = RtUnitConfig { traversal_order: TraversalOrder::Bfs, ..Default::default() };
        let near = RtUnitConfig { near_child_first: true, ..Default::default() };
        for ray in rays {
            let want = brute_force_closest(&ray, &tris);
            for cfg in [&dfs, &bfs, &near] {
                let got = traverse(&bvh, ray, cfg).unwrap();
                prop_assert!(same_hit(&got.hit, &want), "{:?} vs {:?}", got.hit, want);
            }
        }
    }

    #[test]
    fn each_node_fetched_at_most_once_per_ray(
        kind in kind(),
        count in 8usize..300,
        seed in 0u64..1000,
        ray in ray_toward_scene(),
    ) {
        let bvh = build(&generate_synthetic(kind, count, seed), 32).unwrap();
        for order in [TraversalOrder::Dfs, TraversalOrder::Bfs] {
            let cfg = RtUnitConfig { traversal_order: order, ..Default::default() };
            let run = traverse(&bvh, ray, &cfg).unwrap();
            let pops = run.pop_order();
            prop_assert_eq!(pops.len() as u64, run.nodes_visited);
            let unique: HashSet<u64> = pops.iter().copied().collect();
            prop_assert_eq!(unique.len(), pops.len());
            for addr in pops {
                prop_assert!(bvh.node_at(addr).is_ok());
            }
        }
    }

    #[test]
    fn dfs_stack_never_exceeds_bound(
        count in 8usize..400,
        seed in 0u64..1000,
        ray in ray_toward_scene(),
    ) {
        let bvh = build(&generate_synthetic(SyntheticKind::DeepBranch, count, seed), 32).unwrap();
        let cfg = RtUnitConfig::default();
        let run = traverse(&bvh, ray, &cfg).unwrap();
        let mut depth = 0usize;
        for e in &run.events {
            match e.kind {
                StackEventKind::Push => depth += 1,
                StackEventKind::Pop => depth -= 1,
            }
            prop_assert!(depth <= cfg.max_stack_depth);
        }
        prop_assert_eq!(depth, 0);
    }
}

#[test]
fn example_tree_dfs_pop_order() {
    let tree = common::example_tree();
    let run = traverse(&tree.bvh, common::example_ray(), &RtUnitConfig::default()).unwrap();
    assert_eq!(tree.names(&run.pop_order()), "ADIJMPONLKHBFE");
    assert_eq!(run.hit.primitive_id, 4);
}

#[test]
fn example_tree_bfs_finds_same_hit() {
    let tree = common::example_tree();
    let cfg = RtUnitConfig {
        traversal_order: TraversalOrder::Bfs,
        ..Default::default()
    };
    let run = traverse(&tree.bvh, common::example_ray(), &cfg).unwrap();
    let pops = tree.names(&run.pop_order());
    assert!(pops.starts_with("ABD"), "{pops}");
    assert_eq!(run.hit.primitive_id, 4);
}

#[test]
fn trace_lines_are_parseable() {
    let tree = common::example_tree();
    let run = traverse(&tree.bvh, common::example_ray(), &RtUnitConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_trace(&mut buf, &run.events).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), run.events.len());
    for (line, e) in text.lines().zip(&run.events) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 4, "{line}");
        assert_eq!(fields[1].parse::<usize>().unwrap(), e.thread_id);
        let addr = u64::from_str_radix(fields[3].trim_start_matches("0x"), 16).unwrap();
        assert_eq!(addr, e.addr);
    }
}
