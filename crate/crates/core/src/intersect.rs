//! Ray/box and ray/triangle kernels and the brute-force closest-hit oracle.

use crate::bvh::Aabb;
use crate::math::Vec3;
use crate::scene::{Ray, Triangle};

/// Determinant threshold below which a ray is treated as parallel to a
/// triangle's plane.
pub const DET_EPSILON: f32 = 1e-7;
/// Triangle hits at or below this distance are ignored (self-intersection).
pub const T_MIN: f32 = 1e-6;
/// Relative widening applied to slab distances so that box entry distances
/// never exceed the distance of a triangle the box contains.
pub const BOX_SLACK: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRecord {
    pub hit: bool,
    pub t: f32,
    pub primitive_id: u32,
    pub point: Vec3,
    /// Unit geometric normal facing the incoming ray.
    pub normal: Vec3,
}

impl HitRecord {
    pub fn miss() -> Self {
        Self {
            hit: false,
            t: f32::INFINITY,
            primitive_id: u32::MAX,
            point: Vec3::ZERO,
            normal: Vec3::ZERO,
        }
    }

    pub fn from_triangle(ray: &Ray, tri: &Triangle, t: f32) -> Self {
        let mut normal = tri.normal().normalized();
        if normal.dot(ray.direction) > 0.0 {
            normal = -normal;
        }
        Self {
            hit: true,
            t,
            primitive_id: tri.id,
            point: ray.at(t),
            normal,
        }
    }

    /// True when a hit at `t` on primitive `id` should replace this record:
    /// strictly closer, or equally close with a smaller primitive id.
    pub fn is_improved_by(&self, t: f32, id: u32) -> bool {
        !self.hit || t < self.t || (t == self.t && id < self.primitive_id)
    }
}

/// Slab test against the segment `[0, ray.t_max]`. Returns the (conservative)
/// entry distance, `0` when the origin is inside the box.
pub fn ray_box_test(ray: &Ray, aabb: &Aabb) -> Option<f32> {
    if aabb.is_empty() {
        return None;
    }
    let mut near = f32::NEG_INFINITY;
    let mut far = f32::INFINITY;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        let (lo, hi) = (aabb.min[axis], aabb.max[axis]);
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        let err = BOX_SLACK * ((o.abs() + lo.abs().max(hi.abs())) * inv.abs());
        near = near.max(t0 - BOX_SLACK * t0.abs() - err);
        far = far.min(t1 + BOX_SLACK * t1.abs() + err);
    }
    if near > far || far < 0.0 || near > ray.t_max {
        return None;
    }
    Some(near.max(0.0))
}

/// Möller–Trumbore. Returns `t` in `(T_MIN, t_max]`; degenerate triangles and
/// rays in the triangle's plane never hit.
pub fn ray_triangle_test(ray: &Ray, tri: &Triangle) -> Option<f32> {
    let e1 = tri.v1 - tri.v0;
    let e2 = tri.v2 - tri.v0;
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    if det.abs() < DET_EPSILON {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = ray.origin - tri.v0;
    let u = s.dot(p) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv_det;
    (t > T_MIN && t <= ray.t_max).then_some(t)
}

/// Tests every triangle; the closest hit wins, ties go to the smaller id.
pub fn brute_force_closest(ray: &Ray, triangles: &[Triangle]) -> HitRecord {
    let mut best = HitRecord::miss();
    for tri in triangles {
        if let Some(t) = ray_triangle_test(ray, tri) {
            if best.is_improved_by(t, tri.id) {
                best = HitRecord::from_triangle(ray, tri, t);
            }
        }
    }
    best
}
