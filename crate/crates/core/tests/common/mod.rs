#![allow(dead_code)]

use std::collections::HashMap;

use ttpsim::bvh::{FlatBvh, TreeSpec, DEFAULT_BASE_ADDR};
use ttpsim::{Ray, Triangle, Vec3};

/// The 16-node example tree with named nodes. Leaves O and E are hit (O at
/// z = 50, E at z = 10); the other leaves overlap the ray with their boxes
/// but not their triangles; C and G sit off to the side.
pub struct ExampleTree {
    pub bvh: FlatBvh,
    pub addr: HashMap<char, u64>,
    pub name: HashMap<u64, char>,
}

impl ExampleTree {
    pub fn names(&self, addrs: &[u64]) -> String {
        addrs.iter().map(|a| self.name[a]).collect()
    }
}

fn hit_tri(z: f32, id: u32) -> Triangle {
    Triangle::new(Vec3::new(-1.0, -1.0, z), Vec3::new(1.0, -1.0, z), Vec3::new(0.0, 1.0, z), id)
}

// Bounding box straddles the ray, triangle does not.
fn near_miss_tri(z: f32, id: u32) -> Triangle {
    Triangle::new(Vec3::new(-1.0, 1.0, z), Vec3::new(1.0, 1.0, z), Vec3::new(1.0, -0.5, z), id)
}

fn aside_tri(z: f32, id: u32) -> Triangle {
    Triangle::new(Vec3::new(5.0, 0.0, z), Vec3::new(6.0, 0.0, z), Vec3::new(5.5, 1.0, z), id)
}

pub fn example_ray() -> Ray {
    Ray::new(Vec3::new(0.0, 0.0, -100.0), Vec3::new(0.0, 0.0, 1.0))
}

pub fn example_tree() -> ExampleTree {
    use TreeSpec::{Internal, Leaf};
    let leaf = |t: Triangle| Leaf(t);
    // children in index order
    let m = Internal(vec![leaf(near_miss_tri(60.0, 13)), leaf(hit_tri(50.0, 14)), leaf(near_miss_tri(70.0, 15))]);
    let j = Internal(vec![leaf(near_miss_tri(35.0, 11)), m]);
    let i = Internal(vec![leaf(near_miss_tri(40.0, 10)), j]);
    let d = Internal(vec![leaf(near_miss_tri(45.0, 8)), i]);
    let b = Internal(vec![leaf(hit_tri(10.0, 4)), leaf(near_miss_tri(20.0, 5)), leaf(aside_tri(30.0, 6))]);
    let a = Internal(vec![b, leaf(aside_tri(15.0, 3)), d]);
    let bvh = FlatBvh::from_tree(&a, DEFAULT_BASE_ADDR);
    // pre-order of the tree above
    let order = "ABEFGCDHIKJLMNOP";
    let nodes = bvh.nodes().expect("valid example tree");
    assert_eq!(nodes.len(), order.len());
    let mut addr = HashMap::new();
    let mut name = HashMap::new();
    for (n, c) in nodes.iter().zip(order.chars()) {
        addr.insert(c, n.addr());
        name.insert(n.addr(), c);
    }
    ExampleTree { bvh, addr, name }
}
