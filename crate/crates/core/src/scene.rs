//! Triangle scenes and the rays that drive a simulation.
//!
//! Scenes come either from a minimal OBJ subset (`v` and triangular `f`
//! records) or from one of the deterministic synthetic generators. Rays are
//! produced by a pinhole camera (primary rays) and by a cosine-weighted
//! hemisphere sampler around hit points (bounce rays).

use std::f32::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::intersect::HitRecord;
use crate::math::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v0: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
    pub id: u32,
}

impl Triangle {
    pub fn new(v0: Vec3, v1: Vec3, v2: Vec3, id: u32) -> Self {
        Self { v0, v1, v2, id }
    }

    /// Zero-area triangles are kept in storage but never reported as hit.
    pub fn is_degenerate(&self) -> bool {
        (self.v1 - self.v0).cross(self.v2 - self.v0).length() == 0.0
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v0 + self.v1 + self.v2) * (1.0 / 3.0)
    }

    /// Unnormalized geometric normal, following the v0→v1→v2 winding.
    pub fn normal(&self) -> Vec3 {
        (self.v1 - self.v0).cross(self.v2 - self.v0)
    }

    pub fn translated(&self, by: Vec3) -> Triangle {
        Triangle::new(self.v0 + by, self.v1 + by, self.v2 + by, self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RayMode {
    ClosestHit,
    AnyHit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub mode: RayMode,
    pub t_max: f32,
}

impl Ray {
    /// Builds a closest-hit ray with an unbounded segment. The direction is
    /// normalized; it must not be the zero vector.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        debug_assert!(direction.length() > 0.0, "zero ray direction");
        Self {
            origin,
            direction: direction.normalized(),
            mode: RayMode::ClosestHit,
            t_max: f32::INFINITY,
        }
    }

    pub fn with_mode(mut self, mode: RayMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_t_max(mut self, t_max: f32) -> Self {
        debug_assert!(t_max > 0.0);
        self.t_max = t_max;
        self
    }

    pub fn at(&self, t: f32) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_degrees: f32,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera resolution must be at least 1x1".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::InvalidConfig(format!(
                "camera fov {} outside (0, 180)",
                self.fov_degrees
            )));
        }
        let forward = self.look_at - self.position;
        if forward.length() == 0.0 || forward.cross(self.up).length() == 0.0 {
            return Err(Error::InvalidConfig(
                "camera look direction is zero or parallel to up".into(),
            ));
        }
        Ok(())
    }

    /// Camera on the −z side of `bounds`, looking at their center with a 45°
    /// field of view and the whole box in frame.
    pub fn framing(lo: Vec3, hi: Vec3, width: u32, height: u32) -> Camera {
        let center = (lo + hi) * 0.5;
        let half = (hi - lo) * 0.5;
        let radius = half.x.max(half.y).max(1e-3);
        let fov_degrees = 45.0f32;
        let dist = radius / (fov_degrees.to_radians() * 0.5).tan() * 1.05 + half.z;
        Camera {
            position: center - Vec3::new(0.0, 0.0, dist),
            look_at: center,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_degrees,
            width,
            height,
        }
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        (forward, right, up)
    }

    fn ray_through(&self, px: f32, py: f32) -> Ray {
        let (forward, right, up) = self.basis();
        let tan_half = (self.fov_degrees.to_radians() * 0.5).tan();
        let aspect = self.width as f32 / self.height as f32;
        let u = (px / self.width as f32 * 2.0 - 1.0) * tan_half * aspect;
        let v = (1.0 - py / self.height as f32 * 2.0) * tan_half;
        Ray::new(self.position, forward + right * u + up * v)
    }
}

/// One closest-hit ray through each pixel center, row-major from the top row.
pub fn generate_primary_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.width as usize * camera.height as usize);
    for y in 0..camera.height {
        for x in 0..camera.width {
            rays.push(camera.ray_through(x as f32 + 0.5, y as f32 + 0.5));
        }
    }
    rays
}

/// `samples` rays per pixel, pixel-major. The first sample of each pixel is the
/// pixel center; the rest are jittered with a seeded generator.
pub fn generate_primary_rays_spp(camera: &Camera, samples: u32, seed: u64) -> Vec<Ray> {
    if samples <= 1 {
        return generate_primary_rays(camera);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays =
        Vec::with_capacity(camera.width as usize * camera.height as usize * samples as usize);
    for y in 0..camera.height {
        for x in 0..camera.width {
            rays.push(camera.ray_through(x as f32 + 0.5, y as f32 + 0.5));
            for _ in 1..samples {
                let jx: f32 = rng.gen();
                let jy: f32 = rng.gen();
                rays.push(camera.ray_through(x as f32 + jx, y as f32 + jy));
            }
        }
    }
    rays
}

/// Diffuse bounce stand-in: `rays_per_hit` cosine-weighted directions around
/// the surface normal of every hit, offset slightly off the surface.
pub fn generate_bounce_rays(hits: &[HitRecord], seed: u64, rays_per_hit: u32) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = Vec::new();
    for hit in hits.iter().filter(|h| h.hit) {
        let n = hit.normal.normalized();
        let (t, b) = orthonormal_basis(n);
        let origin = hit.point + n * (1e-4 * hit.point.max_abs_component().max(1.0));
        for _ in 0..rays_per_hit {
            let r1: f32 = rng.gen();
            let r2: f32 = rng.gen();
            let phi = 2.0 * PI * r1;
            let r = r2.sqrt();
            let local = Vec3::new(r * phi.cos(), r * phi.sin(), (1.0 - r2).sqrt());
            let dir = t * local.x + b * local.y + n * local.z;
            rays.push(Ray::new(origin, dir));
        }
    }
    rays
}

// Frisvad / Duff et al. branchless basis.
fn orthonormal_basis(n: Vec3) -> (Vec3, Vec3) {
    let sign = 1.0f32.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Vec<Triangle>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<Vec<Triangle>> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap_or_default();
        let err = |msg: String| Error::ObjParse { line: line_no, msg };
        match tag {
            "v" => {
                let coords: Vec<&str> = tokens.collect();
                if coords.len() != 3 && coords.len() != 4 {
                    return Err(err(format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                let mut xyz = [0f32; 3];
                for (slot, tok) in xyz.iter_mut().zip(&coords) {
                    *slot = tok
                        .parse()
                        .map_err(|_| err(format!("bad coordinate {tok:?}")))?;
                    if !slot.is_finite() {
                        return Err(err(format!("non-finite coordinate {tok:?}")));
                    }
                }
                vertices.push(Vec3::from_array(xyz));
            }
            "f" => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(err("non-triangular face".into()));
                }
                let mut corners = [Vec3::ZERO; 3];
                for (slot, tok) in corners.iter_mut().zip(&refs) {
                    let index_tok = tok.split('/').next().unwrap_or_default();
                    let index: usize = index_tok
                        .parse()
                        .map_err(|_| err(format!("bad vertex index {tok:?}")))?;
                    if index == 0 || index > vertices.len() {
                        return Err(err(format!(
                            "vertex index {index} out of range 1..={}",
                            vertices.len()
                        )));
                    }
                    *slot = vertices[index - 1];
                }
                let id = triangles.len() as u32;
                triangles.push(Triangle::new(corners[0], corners[1], corners[2], id));
            }
            "vn" | "vt" | "o" | "g" | "s" => {}
            other => return Err(err(format!("unsupported record {other:?}"))),
        }
    }
    Ok(triangles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    Grid,
    RandomBoxes,
    DeepBranch,
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grid" => Ok(Self::Grid),
            "random-boxes" => Ok(Self::RandomBoxes),
            "deep-branch" => Ok(Self::DeepBranch),
            other => Err(format!("unknown synthetic scene kind {other:?}")),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grid => "grid",
            Self::RandomBoxes => "random-boxes",
            Self::DeepBranch => "deep-branch",
        })
    }
}

/// Deterministic desk-scale scenes. `count` is the exact number of triangles
/// produced.
pub fn generate_synthetic(kind: SyntheticKind, count: usize, seed: u64) -> Vec<Triangle> {
    let mut out = Vec::with_capacity(count);
    match kind {
        SyntheticKind::Grid => grid(count, &mut out),
        SyntheticKind::RandomBoxes => random_boxes(count, seed, &mut out),
        SyntheticKind::DeepBranch => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            deep_cluster(&mut rng, Vec3::ZERO, 10.0, count, &mut out);
        }
    }
    out
}

fn push_tri(out: &mut Vec<Triangle>, a: Vec3, b: Vec3, c: Vec3) {
    let id = out.len() as u32;
    out.push(Triangle::new(a, b, c, id));
}

// Two triangles per unit cell on the z = 0 plane, cells filled row by row.
fn grid(count: usize, out: &mut Vec<Triangle>) {
    let cells = count.div_ceil(2);
    let side = (cells as f64).sqrt().ceil().max(1.0) as usize;
    'cells: for cell in 0..cells {
        let x = (cell % side) as f32;
        let y = (cell / side) as f32;
        let p00 = Vec3::new(x, y, 0.0);
        let p10 = Vec3::new(x + 1.0, y, 0.0);
        let p01 = Vec3::new(x, y + 1.0, 0.0);
        let p11 = Vec3::new(x + 1.0, y + 1.0, 0.0);
        for (a, b, c) in [(p00, p10, p11), (p00, p11, p01)] {
            if out.len() == count {
                break 'cells;
            }
            push_tri(out, a, b, c);
        }
    }
}

// Axis-aligned boxes of random size scattered in [-10, 10]^3, 12 triangles
// per box; the last box is truncated to hit `count` exactly.
fn random_boxes(count: usize, seed: u64, out: &mut Vec<Triangle>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < count {
        let c = Vec3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        );
        let h = Vec3::new(
            rng.gen_range(0.1..0.75),
            rng.gen_range(0.1..0.75),
            rng.gen_range(0.1..0.75),
        );
        let corner = |i: usize| {
            Vec3::new(
                if i & 1 == 0 { c.x - h.x } else { c.x + h.x },
                if i & 2 == 0 { c.y - h.y } else { c.y + h.y },
                if i & 4 == 0 { c.z - h.z } else { c.z + h.z },
            )
        };
        const FACES: [[usize; 4]; 6] = [
            [0, 1, 3, 2],
            [4, 6, 7, 5],
            [0, 4, 5, 1],
            [2, 3, 7, 6],
            [0, 2, 6, 4],
            [1, 5, 7, 3],
        ];
        for f in FACES {
            for (a, b, c) in [(f[0], f[1], f[2]), (f[0], f[2], f[3])] {
                if out.len() == count {
                    return;
                }
                push_tri(out, corner(a), corner(b), corner(c));
            }
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let len = v.length();
        if len > 1e-3 && len <= 1.0 {
            return v * (1.0 / len);
        }
    }
}

// Nested clusters of thin sliver triangles. Slivers have large bounding boxes
// but little area, so rays enter many overlapping leaves without hitting
// their primitives: deep descents followed by long runs of pops.
fn deep_cluster(
    rng: &mut ChaCha8Rng,
    center: Vec3,
    radius: f32,
    count: usize,
    out: &mut Vec<Triangle>,
) {
    if count <= 6 {
        for _ in 0..count {
            let p = center + random_unit(rng) * (radius * rng.gen_range(0.0..0.6f32));
            let axis = random_unit(rng);
            let mut side = axis.cross(random_unit(rng));
            if side.length() < 1e-3 {
                side = axis.cross(Vec3::new(0.0, 0.0, 1.0));
            }
            let side = side.normalized();
            let len = radius * rng.gen_range(0.5..1.0f32);
            let width = len * rng.gen_range(0.1..0.4f32);
            let a = p - axis * len;
            let b = p + axis * len;
            let c = p + side * width;
            push_tri(out, a, b, c);
        }
        return;
    }
    let parts = rng.gen_range(3..=6usize).min(count);
    let base = count / parts;
    let extra = count % parts;
    for i in 0..parts {
        let n = base + usize::from(i < extra);
        let offset = random_unit(rng) * (radius * rng.gen_range(0.1..0.35f32));
        deep_cluster(rng, center + offset, radius * 0.65, n, out);
    }
}

/// Axis-aligned bounds of a triangle list, or `None` when empty.
pub fn scene_bounds(triangles: &[Triangle]) -> Option<(Vec3, Vec3)> {
    let first = triangles.first()?;
    let mut lo = first.v0;
    let mut hi = first.v0;
    for t in triangles {
        for v in [t.v0, t.v1, t.v2] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Some((lo, hi))
}
