//! Simulation configuration and its flat `key = value` file format.
//!
//! Absent keys keep their defaults (the reference GPU configuration). Sizes
//! accept `KB` / `MB` suffixes. Lines starting with `#` and trailing `#`
//! comments are ignored.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memhier::{Associativity, CacheConfig, MemConfig};
use crate::prefetch::{Arbitration, Intensity, PrefetchPolicy, PrefetchPolicyConfig};
use crate::rtunit::{RtUnitConfig, TraversalOrder};
use crate::scene::{self, SyntheticKind, Triangle};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneSource {
    Obj(PathBuf),
    Synthetic {
        kind: SyntheticKind,
        count: usize,
        seed: u64,
    },
}

impl SceneSource {
    pub fn load(&self) -> Result<Vec<Triangle>> {
        match self {
            SceneSource::Obj(path) => scene::load_obj(path),
            SceneSource::Synthetic { kind, count, seed } => {
                Ok(scene::generate_synthetic(*kind, *count, *seed))
            }
        }
    }
}

impl fmt::Display for SceneSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneSource::Obj(p) => write!(f, "{}", p.display()),
            SceneSource::Synthetic { kind, count, seed } => {
                write!(f, "synthetic:{kind}:{count}:{seed}")
            }
        }
    }
}

impl FromStr for SceneSource {
    type Err = String;

    /// `synthetic:<kind>[:<triangles>[:<seed>]]` or a path to an OBJ file.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let Some(spec) = s.strip_prefix("synthetic:") else {
            if s.is_empty() {
                return Err("empty scene path".into());
            }
            return Ok(SceneSource::Obj(PathBuf::from(s)));
        };
        let mut parts = spec.split(':');
        let kind: SyntheticKind = parts.next().unwrap_or_default().parse()?;
        let count = match parts.next() {
            Some(c) => c.parse().map_err(|_| format!("bad triangle count {c:?}"))?,
            None => 2048,
        };
        let seed = match parts.next() {
            Some(v) => v.parse().map_err(|_| format!("bad scene seed {v:?}"))?,
            None => 0,
        };
        if parts.next().is_some() {
            return Err(format!("too many fields in scene spec {s:?}"));
        }
        if count == 0 {
            return Err("synthetic scene needs at least one triangle".into());
        }
        Ok(SceneSource::Synthetic { kind, count, seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub sm_count: usize,
    pub rt: RtUnitConfig,
    pub mem: MemConfig,
    pub prefetch: PrefetchPolicyConfig,
    pub scene: SceneSource,
    pub width: u32,
    pub height: u32,
    pub bounce_depth: u32,
    pub samples_per_pixel: u32,
    pub seed: u64,
    pub max_bvh_depth: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sm_count: 8,
            rt: RtUnitConfig::default(),
            mem: MemConfig::default(),
            prefetch: PrefetchPolicyConfig::default(),
            scene: SceneSource::Synthetic {
                kind: SyntheticKind::DeepBranch,
                count: 2048,
                seed: 0,
            },
            width: 32,
            height: 32,
            bounce_depth: 1,
            samples_per_pixel: 1,
            seed: 0,
            max_bvh_depth: crate::bvh::DEFAULT_MAX_DEPTH,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sm_count == 0 {
            return Err(Error::InvalidConfig("sm_count must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("resolution must be at least 1x1".into()));
        }
        if self.samples_per_pixel == 0 {
            return Err(Error::InvalidConfig("spp must be positive".into()));
        }
        if self.max_bvh_depth == 0 {
            return Err(Error::InvalidConfig("max_bvh_depth must be positive".into()));
        }
        self.rt.validate()?;
        self.mem.l1.validate("l1")?;
        self.mem.l2.validate("l2")?;
        if self.mem.dram.latency == 0 || self.mem.dram.accept_per_cycle == 0 {
            return Err(Error::InvalidConfig(
                "dram latency and accept_per_cycle must be positive".into(),
            ));
        }
        let needs = match self.prefetch.policy {
            PrefetchPolicy::TtpBfs => Some(TraversalOrder::Bfs),
            PrefetchPolicy::TtpDfs | PrefetchPolicy::ParkLeaf => Some(TraversalOrder::Dfs),
            _ => None,
        };
        if let Some(order) = needs.filter(|&o| o != self.rt.traversal_order) {
            return Err(Error::InvalidConfig(format!(
                "policy {} requires traversal_order = {order}",
                self.prefetch.policy
            )));
        }
        if self.prefetch.bfs_distance == 0 || self.prefetch.queue_capacity == 0 {
            return Err(Error::InvalidConfig(
                "bfs_distance and prefetch_queue must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Same run with prefetching disabled.
    pub fn baseline(&self) -> SimConfig {
        let mut b = self.clone();
        b.prefetch.policy = PrefetchPolicy::Off;
        b
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("malformed value {v:?}"))
        }
        let rt = &mut self.rt;
        match key {
            "sm_count" => self.sm_count = num(value)?,
            "warp_size" => rt.warp_size = num(value)?,
            "warp_buffer_size" => rt.warp_buffer_size = num(value)?,
            "traversal_order" => rt.traversal_order = value.parse::<TraversalOrder>()?,
            "box_test_latency" => rt.box_test_latency = num(value)?,
            "leaf_test_latency" => rt.leaf_test_latency = num(value)?,
            "max_stack_depth" => rt.max_stack_depth = num(value)?,
            "max_queue_len" => rt.max_queue_len = num(value)?,
            "near_child_first" => rt.near_child_first = parse_bool(value)?,
            "dram.latency" => self.mem.dram.latency = num(value)?,
            "dram.accept_per_cycle" => self.mem.dram.accept_per_cycle = num(value)?,
            "policy" => self.prefetch.policy = value.parse()?,
            "bfs_distance" => self.prefetch.bfs_distance = num(value)?,
            "intensity" => self.prefetch.intensity = value.parse::<Intensity>()?,
            "arbitration" => self.prefetch.arbitration = value.parse::<Arbitration>()?,
            "prefetch_queue" => self.prefetch.queue_capacity = num(value)?,
            "scene" => self.scene = value.parse()?,
            "width" => self.width = num(value)?,
            "height" => self.height = num(value)?,
            "resolution" => (self.width, self.height) = parse_resolution(value)?,
            "bounce_depth" => self.bounce_depth = num(value)?,
            "spp" => self.samples_per_pixel = num(value)?,
            "seed" => self.seed = num(value)?,
            "max_bvh_depth" => self.max_bvh_depth = num(value)?,
            _ => {
                let (level, field) = key.split_once('.').ok_or("unknown key")?;
                let cache = match level {
                    "l1" => &mut self.mem.l1,
                    "l2" => &mut self.mem.l2,
                    _ => return Err("unknown key".into()),
                };
                set_cache(cache, field, value)?;
            }
        }
        Ok(())
    }
}

fn set_cache(cache: &mut CacheConfig, field: &str, value: &str) -> std::result::Result<(), String> {
    let num = |v: &str| -> std::result::Result<u64, String> {
        v.parse().map_err(|_| format!("malformed value {v:?}"))
    };
    match field {
        "capacity" => cache.capacity = parse_size(value)?,
        "associativity" => {
            cache.associativity = match value {
                "full" => Associativity::Full,
                v => Associativity::Ways(num(v.trim_end_matches("-way"))? as usize),
            }
        }
        "hit_latency" => cache.hit_latency = num(value)?,
        "mshr_entries" => cache.mshr_entries = num(value)? as usize,
        "mshr_merge_capacity" => cache.mshr_merge_capacity = num(value)? as usize,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("malformed boolean {v:?}")),
    }
}

/// `4096`, `32KB`, `4MB` (binary multiples).
pub fn parse_size(v: &str) -> std::result::Result<u64, String> {
    let upper = v.trim().to_ascii_uppercase();
    let (digits, mult) = if let Some(d) = upper.strip_suffix("KB").or(upper.strip_suffix('K')) {
        (d, 1024)
    } else if let Some(d) = upper.strip_suffix("MB").or(upper.strip_suffix('M')) {
        (d, 1024 * 1024)
    } else {
        (upper.strip_suffix('B').unwrap_or(&upper), 1)
    };
    digits
        .trim()
        .parse::<u64>()
        .map(|n| n * mult)
        .map_err(|_| format!("malformed size {v:?}"))
}

/// `WxH`.
pub fn parse_resolution(v: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = v
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("malformed resolution {v:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("malformed resolution {v:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("malformed resolution {v:?}"))?;
    Ok((w, h))
}

/// Parses config text. Relative OBJ paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: Option<&Path>) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                line: line_no,
                key: line.to_string(),
                msg: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        cfg.set(key, value).map_err(|msg| Error::Config {
            line: line_no,
            key: key.to_string(),
            msg,
        })?;
        if key == "scene" {
            if let (SceneSource::Obj(p), Some(dir)) = (&cfg.scene, base_dir) {
                if p.is_relative() {
                    cfg.scene = SceneSource::Obj(dir.join(p));
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<SimConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path.parent())
}
