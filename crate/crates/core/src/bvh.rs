//! 6-ary BVH construction and its flat, byte-addressed memory image.
//!
//! Node records live in one contiguous region starting at `base_addr`, laid
//! out in pre-order. Every record starts on a 32-byte sector boundary:
//!
//! ```text
//! internal (224 B): tag u32 | child_count u32 | 24 B reserved
//!                   6 x { min xyz f32 | max xyz f32 | child_addr u64 }
//! leaf      (64 B): tag u32 | primitive id u32 | v0 v1 v2 (9 x f32) | 20 B pad
//! ```
//!
//! The tags are quiet-NaN bit patterns, so a finite coordinate can never be
//! mistaken for a node header.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::Triangle;

pub const SECTOR_SIZE: u64 = 32;
pub const INTERNAL_NODE_SIZE: u64 = 224;
pub const LEAF_NODE_SIZE: u64 = 64;
pub const MAX_CHILDREN: usize = 6;
pub const DEFAULT_BASE_ADDR: u64 = 0x1000_0000;
pub const DEFAULT_MAX_DEPTH: usize = 32;

const INTERNAL_TAG: u32 = 0x7FC0_1A01;
const LEAF_TAG: u32 = 0x7FC0_1A02;
const HEADER_SIZE: usize = 32;
const CHILD_RECORD_SIZE: usize = 32;

const DUMP_MAGIC: &[u8; 8] = b"TTPBVH\0\0";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    /// The empty box: `min > max` on every axis.
    pub fn empty() -> Self {
        Self {
            min: Vec3::splat(f32::INFINITY),
            max: Vec3::splat(f32::NEG_INFINITY),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn of_triangle(tri: &Triangle) -> Self {
        Self {
            min: tri.v0.min(tri.v1).min(tri.v2),
            max: tri.v0.max(tri.v1).max(tri.v2),
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        other.is_empty()
            || (self.min.x <= other.min.x
                && self.min.y <= other.min.y
                && self.min.z <= other.min.z
                && self.max.x >= other.max.x
                && self.max.y >= other.max.y
                && self.max.z >= other.max.z)
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        self.contains(&Aabb::new(p, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildRef {
    pub addr: u64,
    pub aabb: Aabb,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BvhNode {
    Internal { addr: u64, children: Vec<ChildRef> },
    Leaf { addr: u64, triangle: Triangle },
}

impl BvhNode {
    pub fn addr(&self) -> u64 {
        match self {
            BvhNode::Internal { addr, .. } | BvhNode::Leaf { addr, .. } => *addr,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, BvhNode::Leaf { .. })
    }

    pub fn size(&self) -> u64 {
        if self.is_leaf() {
            LEAF_NODE_SIZE
        } else {
            INTERNAL_NODE_SIZE
        }
    }

    /// Sector-aligned chunk addresses covering the record, in address order.
    pub fn footprint(&self) -> Vec<u64> {
        node_footprint(self.addr(), self.size())
    }
}

pub fn node_footprint(addr: u64, size: u64) -> Vec<u64> {
    (0..size.div_ceil(SECTOR_SIZE))
        .map(|i| addr + i * SECTOR_SIZE)
        .collect()
}

/// Hand-described tree shape, serialized with [`FlatBvh::from_tree`]. Child
/// boxes are the unions of the triangles below them.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeSpec {
    Leaf(Triangle),
    Internal(Vec<TreeSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatBvh {
    base_addr: u64,
    root_addr: u64,
    root_aabb: Aabb,
    image: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

/// Median-split build over `triangles`, at most [`MAX_CHILDREN`] children per
/// node and one triangle per leaf.
pub fn build(triangles: &[Triangle], max_leaf_depth: usize) -> Result<FlatBvh> {
    if triangles.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut order: Vec<usize> = (0..triangles.len()).collect();
    let spec = split_node(triangles, &mut order);
    let depth = spec_depth(&spec);
    if depth > max_leaf_depth {
        return Err(Error::TreeTooDeep {
            depth,
            max: max_leaf_depth,
        });
    }
    Ok(FlatBvh::from_tree(&spec, DEFAULT_BASE_ADDR))
}

fn split_node(triangles: &[Triangle], order: &mut [usize]) -> TreeSpec {
    if order.len() == 1 {
        return TreeSpec::Leaf(triangles[order[0]]);
    }
    // Groups are contiguous ranges of `order`, kept in spatial split order.
    let mut groups: Vec<(usize, usize)> = vec![(0, order.len())];
    while groups.len() < MAX_CHILDREN {
        let Some((gi, &(start, end))) = groups
            .iter()
            .enumerate()
            .filter(|(_, (s, e))| e - s > 1)
            .max_by(|(ia, a), (ib, b)| (a.1 - a.0).cmp(&(b.1 - b.0)).then(ib.cmp(ia)))
        else {
            break;
        };
        let slice = &mut order[start..end];
        let axis = longest_centroid_axis(triangles, slice);
        slice.sort_by(|&a, &b| {
            let ca = triangles[a].centroid()[axis];
            let cb = triangles[b].centroid()[axis];
            ca.total_cmp(&cb).then(triangles[a].id.cmp(&triangles[b].id))
        });
        let mid = start + (end - start) / 2;
        groups.splice(gi..=gi, [(start, mid), (mid, end)]);
    }
    let children = groups
        .into_iter()
        .map(|(s, e)| split_node(triangles, &mut order[s..e]))
        .collect();
    TreeSpec::Internal(children)
}

fn longest_centroid_axis(triangles: &[Triangle], slice: &[usize]) -> usize {
    let mut lo = Vec3::splat(f32::INFINITY);
    let mut hi = Vec3::splat(f32::NEG_INFINITY);
    for &i in slice {
        let c = triangles[i].centroid();
        lo = lo.min(c);
        hi = hi.max(c);
    }
    let ext = hi - lo;
    if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    }
}

fn spec_depth(spec: &TreeSpec) -> usize {
    match spec {
        TreeSpec::Leaf(_) => 0,
        TreeSpec::Internal(children) => 1 + children.iter().map(spec_depth).max().unwrap_or(0),
    }
}

fn spec_bounds(spec: &TreeSpec) -> Aabb {
    match spec {
        TreeSpec::Leaf(tri) => Aabb::of_triangle(tri),
        TreeSpec::Internal(children) => children
            .iter()
            .fold(Aabb::empty(), |acc, c| acc.union(&spec_bounds(c))),
    }
}

fn spec_size(spec: &TreeSpec) -> u64 {
    match spec {
        TreeSpec::Leaf(_) => LEAF_NODE_SIZE,
        TreeSpec::Internal(children) => {
            INTERNAL_NODE_SIZE + children.iter().map(spec_size).sum::<u64>()
        }
    }
}

fn put_u32(image: &mut [u8], off: usize, v: u32) {
    image[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_u64(image: &mut [u8], off: usize, v: u64) {
    image[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(image: &mut [u8], off: usize, v: f32) {
    put_u32(image, off, v.to_bits());
}

fn get_u32(image: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(image[off..off + 4].try_into().unwrap())
}

fn get_u64(image: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(image[off..off + 8].try_into().unwrap())
}

fn get_f32(image: &[u8], off: usize) -> f32 {
    f32::from_bits(get_u32(image, off))
}

fn get_vec3(image: &[u8], off: usize) -> Vec3 {
    Vec3::new(
        get_f32(image, off),
        get_f32(image, off + 4),
        get_f32(image, off + 8),
    )
}

fn put_vec3(image: &mut [u8], off: usize, v: Vec3) {
    put_f32(image, off, v.x);
    put_f32(image, off + 4, v.y);
    put_f32(image, off + 8, v.z);
}

impl FlatBvh {
    pub fn from_tree(spec: &TreeSpec, base_addr: u64) -> FlatBvh {
        assert_eq!(base_addr % SECTOR_SIZE, 0, "base address must be sector aligned");
        let mut image = vec![0u8; spec_size(spec) as usize];
        let mut cursor = 0u64;
        write_spec(spec, &mut image, base_addr, &mut cursor);
        FlatBvh {
            base_addr,
            root_addr: base_addr,
            root_aabb: spec_bounds(spec),
            image,
        }
    }

    /// Reassembles an image; no validation beyond alignment of the base.
    pub fn from_parts(base_addr: u64, root_addr: u64, root_aabb: Aabb, image: Vec<u8>) -> Self {
        Self {
            base_addr,
            root_addr,
            root_aabb,
            image,
        }
    }

    pub fn base_addr(&self) -> u64 {
        self.base_addr
    }

    pub fn root_addr(&self) -> u64 {
        self.root_addr
    }

    pub fn root_aabb(&self) -> Aabb {
        self.root_aabb
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }

    pub fn image_mut(&mut self) -> &mut [u8] {
        &mut self.image
    }

    pub fn size_bytes(&self) -> u64 {
        self.image.len() as u64
    }

    pub fn end_addr(&self) -> u64 {
        self.base_addr + self.size_bytes()
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        addr >= self.base_addr && addr < self.end_addr()
    }

    fn offset_of(&self, addr: u64, size: u64) -> Option<usize> {
        if addr < self.base_addr || addr + size > self.end_addr() {
            return None;
        }
        Some((addr - self.base_addr) as usize)
    }

    /// Record size of the node at `addr`, from its tag alone.
    pub fn node_size_at(&self, addr: u64) -> Result<u64> {
        let Some(off) = self.offset_of(addr, 4).filter(|_| addr.is_multiple_of(SECTOR_SIZE)) else {
            return Err(Error::NodeAddress {
                addr,
                reason: "node address outside the BVH image",
            });
        };
        match get_u32(&self.image, off) {
            INTERNAL_TAG => Ok(INTERNAL_NODE_SIZE),
            LEAF_TAG => Ok(LEAF_NODE_SIZE),
            _ => Err(Error::NodeAddress {
                addr,
                reason: "address is not a node start",
            }),
        }
    }

    /// Decodes the node record starting at `addr`.
    pub fn node_at(&self, addr: u64) -> Result<BvhNode> {
        if !addr.is_multiple_of(SECTOR_SIZE) {
            return Err(Error::NodeAddress {
                addr,
                reason: "unaligned node address",
            });
        }
        let Some(off) = self.offset_of(addr, 8) else {
            return Err(Error::NodeAddress {
                addr,
                reason: "node address outside the BVH image",
            });
        };
        match get_u32(&self.image, off) {
            INTERNAL_TAG => {
                if self.offset_of(addr, INTERNAL_NODE_SIZE).is_none() {
                    return Err(Error::NodeAddress {
                        addr,
                        reason: "truncated internal node",
                    });
                }
                let count = get_u32(&self.image, off + 4) as usize;
                if count == 0 || count > MAX_CHILDREN {
                    return Err(Error::NodeAddress {
                        addr,
                        reason: "bad child count",
                    });
                }
                let children = (0..count)
                    .map(|i| {
                        let rec = off + HEADER_SIZE + i * CHILD_RECORD_SIZE;
                        ChildRef {
                            aabb: Aabb::new(get_vec3(&self.image, rec), get_vec3(&self.image, rec + 12)),
                            addr: get_u64(&self.image, rec + 24),
                        }
                    })
                    .collect();
                Ok(BvhNode::Internal { addr, children })
            }
            LEAF_TAG => {
                if self.offset_of(addr, LEAF_NODE_SIZE).is_none() {
                    return Err(Error::NodeAddress {
                        addr,
                        reason: "truncated leaf node",
                    });
                }
                let id = get_u32(&self.image, off + 4);
                let triangle = Triangle::new(
                    get_vec3(&self.image, off + 8),
                    get_vec3(&self.image, off + 20),
                    get_vec3(&self.image, off + 32),
                    id,
                );
                Ok(BvhNode::Leaf { addr, triangle })
            }
            _ => Err(Error::NodeAddress {
                addr,
                reason: "address is not a node start",
            }),
        }
    }

    /// Every node reachable from the root, in depth-first pre-order. Assumes a
    /// valid image.
    pub fn nodes(&self) -> Result<Vec<BvhNode>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root_addr];
        while let Some(addr) = stack.pop() {
            let node = self.node_at(addr)?;
            if let BvhNode::Internal { children, .. } = &node {
                stack.extend(children.iter().rev().map(|c| c.addr));
            }
            out.push(node);
        }
        Ok(out)
    }

    pub fn triangles(&self) -> Result<Vec<Triangle>> {
        Ok(self
            .nodes()?
            .into_iter()
            .filter_map(|n| match n {
                BvhNode::Leaf { triangle, .. } => Some(triangle),
                BvhNode::Internal { .. } => None,
            })
            .collect())
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> Result<usize> {
        let mut max = 0;
        let mut stack = vec![(self.root_addr, 0usize)];
        while let Some((addr, d)) = stack.pop() {
            max = max.max(d);
            if let BvhNode::Internal { children, .. } = self.node_at(addr)? {
                stack.extend(children.iter().map(|c| (c.addr, d + 1)));
            }
        }
        Ok(max)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if !self.base_addr.is_multiple_of(SECTOR_SIZE) {
            report.violations.push(format!("unaligned base address {:#x}", self.base_addr));
        }
        let mut walk = Walk {
            bvh: self,
            report: &mut report,
            on_path: HashSet::new(),
            visited: HashSet::new(),
            primitives: HashSet::new(),
            reachable_bytes: 0,
        };
        let bounds = walk.visit(self.root_addr);
        let reachable = walk.reachable_bytes;
        if let Some(bounds) = bounds {
            if !self.root_aabb.contains(&bounds) {
                report.violations.push("root AABB does not contain the scene".into());
            }
        }
        if report.is_valid() && reachable != self.size_bytes() {
            report.violations.push(format!(
                "unreachable bytes in image: {} of {} reachable",
                reachable,
                self.size_bytes()
            ));
        }
        report
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FlatBvh> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        FlatBvh::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.image.len());
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&self.base_addr.to_le_bytes());
        out.extend_from_slice(&self.root_addr.to_le_bytes());
        for v in [self.root_aabb.min, self.root_aabb.max] {
            for c in v.to_array() {
                out.extend_from_slice(&c.to_bits().to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.image.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.image);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FlatBvh> {
        const HEAD: usize = 8 + 4 + 4 + 8 + 8 + 24 + 8;
        if bytes.len() < HEAD || &bytes[..8] != DUMP_MAGIC {
            return Err(Error::BvhFormat("missing magic".into()));
        }
        let version = get_u32(bytes, 8);
        if version != DUMP_VERSION {
            return Err(Error::BvhFormat(format!("unsupported version {version}")));
        }
        let base_addr = get_u64(bytes, 16);
        let root_addr = get_u64(bytes, 24);
        let root_aabb = Aabb::new(get_vec3(bytes, 32), get_vec3(bytes, 44));
        let len = get_u64(bytes, 56) as usize;
        if bytes.len() != HEAD + len {
            return Err(Error::BvhFormat(format!(
                "payload length {} does not match header {}",
                bytes.len() - HEAD,
                len
            )));
        }
        Ok(FlatBvh::from_parts(base_addr, root_addr, root_aabb, bytes[HEAD..].to_vec()))
    }
}

fn write_spec(spec: &TreeSpec, image: &mut [u8], base: u64, cursor: &mut u64) -> u64 {
    let addr = base + *cursor;
    let off = *cursor as usize;
    match spec {
        TreeSpec::Leaf(tri) => {
            *cursor += LEAF_NODE_SIZE;
            put_u32(image, off, LEAF_TAG);
            put_u32(image, off + 4, tri.id);
            put_vec3(image, off + 8, tri.v0);
            put_vec3(image, off + 20, tri.v1);
            put_vec3(image, off + 32, tri.v2);
        }
        TreeSpec::Internal(children) => {
            assert!(
                !children.is_empty() && children.len() <= MAX_CHILDREN,
                "internal node needs 1..={MAX_CHILDREN} children"
            );
            *cursor += INTERNAL_NODE_SIZE;
            put_u32(image, off, INTERNAL_TAG);
            put_u32(image, off + 4, children.len() as u32);
            for (i, child) in children.iter().enumerate() {
                let child_addr = write_spec(child, image, base, cursor);
                let rec = off + HEADER_SIZE + i * CHILD_RECORD_SIZE;
                let b = spec_bounds(child);
                put_vec3(image, rec, b.min);
                put_vec3(image, rec + 12, b.max);
                put_u64(image, rec + 24, child_addr);
            }
        }
    }
    addr
}

struct Walk<'a> {
    bvh: &'a FlatBvh,
    report: &'a mut ValidationReport,
    on_path: HashSet<u64>,
    visited: HashSet<u64>,
    primitives: HashSet<u32>,
    reachable_bytes: u64,
}

impl Walk<'_> {
    // Returns the bounds of the primitives below `addr`, or None when the
    // subtree could not be decoded.
    fn visit(&mut self, addr: u64) -> Option<Aabb> {
        if !addr.is_multiple_of(SECTOR_SIZE) {
            self.report.violations.push(format!("unaligned child address {addr:#x}"));
            return None;
        }
        if self.on_path.contains(&addr) {
            self.report.violations.push(format!("cycle detected at {addr:#x}"));
            return None;
        }
        if !self.visited.insert(addr) {
            self.report.violations.push(format!("node {addr:#x} reached twice"));
            return None;
        }
        let node = match self.bvh.node_at(addr) {
            Ok(n) => n,
            Err(e) => {
                self.report.violations.push(e.to_string());
                return None;
            }
        };
        self.reachable_bytes += node.size();
        match node {
            BvhNode::Leaf { triangle, .. } => {
                if !triangle.v0.is_finite() || !triangle.v1.is_finite() || !triangle.v2.is_finite() {
                    self.report.violations.push(format!("non-finite vertex in leaf {addr:#x}"));
                }
                if !self.primitives.insert(triangle.id) {
                    self.report.violations.push(format!("primitive {} appears twice", triangle.id));
                }
                Some(Aabb::of_triangle(&triangle))
            }
            BvhNode::Internal { children, .. } => {
                self.on_path.insert(addr);
                let mut bounds = Aabb::empty();
                let mut complete = true;
                for child in &children {
                    match self.visit(child.addr) {
                        Some(b) => {
                            if !child.aabb.contains(&b) {
                                self.report.violations.push(format!(
                                    "child AABB at {:#x} does not contain its subtree",
                                    child.addr
                                ));
                            }
                            bounds = bounds.union(&b);
                        }
                        None => complete = false,
                    }
                }
                self.on_path.remove(&addr);
                complete.then_some(bounds)
            }
        }
    }
}
