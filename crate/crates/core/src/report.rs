//! Experiment orchestration outputs: CSV rows, sweeps, and hit-buffer images.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{parse_resolution, parse_size, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::{Level, StatsLedger};
use crate::prefetch::{Arbitration, Intensity, PrefetchPolicy};
use crate::sim::{build_bvh, run_with_bvh, HitBuffer, RunOptions};

pub const CSV_HEADER: &str = "run_id,policy,cycles,speedup_vs_baseline,l1_accuracy,l2_accuracy,\
l1_coverage,l2_coverage,l1_efficiency,l2_efficiency,l1_mpki,l2_mpki,dram_reads,dram_writebacks,\
dram_bw_util,popstreak_1,popstreak_2,popstreak_3,popstreak_4plus,popstreak_miss_1,popstreak_miss_2,\
popstreak_miss_3,popstreak_miss_4plus,avg_nodes_per_ray,max_nodes_per_ray";

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub run_id: String,
    pub policy: PrefetchPolicy,
    pub ledger: StatsLedger,
    pub baseline: StatsLedger,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl CsvRow {
    pub fn to_csv(&self) -> Result<String> {
        let l = &self.ledger;
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{:.6},{},{},{},{},{},{},{:.6},{:.6},{},{},{:.6}",
            self.run_id,
            self.policy,
            l.cycles,
            l.speedup_over(&self.baseline),
            opt(l.accuracy(Level::L1)),
            opt(l.accuracy(Level::L2)),
            opt(l.coverage(&self.baseline, Level::L1)?),
            opt(l.coverage(&self.baseline, Level::L2)?),
            opt(l.efficiency(Level::L1)),
            opt(l.efficiency(Level::L2)),
            l.mpki(Level::L1),
            l.mpki(Level::L2),
            l.dram_reads,
            l.dram_writebacks,
            l.dram_bw_util,
        )
        .expect("writing to a string");
        for v in l.pop_streak.iter().chain(l.pop_streak_dram_miss.iter()) {
            write!(s, ",{v}").expect("writing to a string");
        }
        write!(s, ",{:.6},{}", l.avg_nodes_per_ray(), l.max_nodes_per_ray).expect("writing to a string");
        Ok(s)
    }
}

pub fn to_csv(rows: &[CsvRow]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv()?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(rows: &[CsvRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(rows)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Intensity,
    BfsDistance,
    Arbitration,
    CacheSize,
    Resolution,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Intensity => "intensity",
            SweepAxis::BfsDistance => "bfs_distance",
            SweepAxis::Arbitration => "arbitration",
            SweepAxis::CacheSize => "cache_size",
            SweepAxis::Resolution => "resolution",
        }
    }

    /// Axes that change the workload or the hardware need their own baseline.
    fn needs_own_baseline(self) -> bool {
        matches!(self, SweepAxis::CacheSize | SweepAxis::Resolution)
    }

    fn apply(self, cfg: &mut SimConfig, value: &str) -> Result<()> {
        let bad = |msg: String| Error::InvalidConfig(format!("{}={value}: {msg}", self.name()));
        match self {
            SweepAxis::Intensity => cfg.prefetch.intensity = value.parse::<Intensity>().map_err(bad)?,
            SweepAxis::BfsDistance => {
                cfg.prefetch.bfs_distance = value
                    .parse()
                    .map_err(|_| bad("not a count".into()))?
            }
            SweepAxis::Arbitration => {
                cfg.prefetch.arbitration = value.parse::<Arbitration>().map_err(bad)?
            }
            SweepAxis::CacheSize => cfg.mem.l1.capacity = parse_size(value).map_err(bad)?,
            SweepAxis::Resolution => (cfg.width, cfg.height) = parse_resolution(value).map_err(bad)?,
        }
        cfg.validate()
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            SweepAxis::Intensity,
            SweepAxis::BfsDistance,
            SweepAxis::Arbitration,
            SweepAxis::CacheSize,
            SweepAxis::Resolution,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| format!("unknown sweep axis {s:?}"))
    }
}

#[derive(Debug)]
pub struct SweepResult {
    pub rows: Vec<CsvRow>,
    /// Points that failed, with their error. Other points still ran.
    pub failures: Vec<(String, Error)>,
}

/// Baseline run plus the configured policy run (skipped if the policy is off).
pub fn run_pair(config: &SimConfig, run_id: &str) -> Result<Vec<CsvRow>> {
    let bvh = build_bvh(config)?;
    let baseline = run_with_bvh(&config.baseline(), &bvh, RunOptions::default())?.ledger;
    let mut rows = vec![CsvRow {
        run_id: format!("{run_id}baseline"),
        policy: PrefetchPolicy::Off,
        ledger: baseline.clone(),
        baseline: baseline.clone(),
    }];
    if config.prefetch.policy != PrefetchPolicy::Off {
        let ledger = run_with_bvh(config, &bvh, RunOptions::default())?.ledger;
        rows.push(CsvRow {
            run_id: format!("{run_id}{}", config.prefetch.policy),
            policy: config.prefetch.policy,
            ledger,
            baseline,
        });
    }
    Ok(rows)
}

/// One row per value (plus baselines). Points run in parallel; row order
/// follows `values`.
pub fn run_sweep(base: &SimConfig, axis: SweepAxis, values: &[String]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::EmptySweep(axis.name().into()));
    }
    let bvh = build_bvh(base)?;
    let shared = if axis.needs_own_baseline() {
        None
    } else {
        Some(run_with_bvh(&base.baseline(), &bvh, RunOptions::default())?.ledger)
    };
    let points: Vec<Result<Vec<CsvRow>>> = values
        .par_iter()
        .map(|value| {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, value)?;
            let id = format!("{}={value}", axis.name());
            let mut rows = Vec::new();
            let baseline = match &shared {
                Some(b) => b.clone(),
                None => {
                    let b = run_with_bvh(&cfg.baseline(), &bvh, RunOptions::default())?.ledger;
                    rows.push(CsvRow {
                        run_id: format!("baseline:{id}"),
                        policy: PrefetchPolicy::Off,
                        ledger: b.clone(),
                        baseline: b.clone(),
                    });
                    b
                }
            };
            let ledger = run_with_bvh(&cfg, &bvh, RunOptions::default())?.ledger;
            rows.push(CsvRow {
                run_id: id,
                policy: cfg.prefetch.policy,
                ledger,
                baseline,
            });
            Ok(rows)
        })
        .collect();
    let mut result = SweepResult {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    if let Some(b) = shared {
        result.rows.push(CsvRow {
            run_id: "baseline".into(),
            policy: PrefetchPolicy::Off,
            ledger: b.clone(),
            baseline: b,
        });
    }
    for (value, point) in values.iter().zip(points) {
        match point {
            Ok(rows) => result.rows.extend(rows),
            Err(e) => result.failures.push((value.clone(), e)),
        }
    }
    Ok(result)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Color for a primitive; never black, which is reserved for misses.
pub fn primitive_color(id: u32) -> [u8; 3] {
    let h = splitmix64(u64::from(id)).to_le_bytes();
    let c = [h[0], h[1], h[2]];
    if c == [0, 0, 0] {
        [1, 1, 1]
    } else {
        c
    }
}

/// Binary PPM of the hit buffer.
pub fn encode_ppm(hits: &HitBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", hits.width, hits.height).into_bytes();
    for h in &hits.pixels {
        out.extend_from_slice(&if h.hit { primitive_color(h.primitive_id) } else { [0, 0, 0] });
    }
    out
}

pub fn dump_image(hits: &HitBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(hits)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intersect::HitRecord;
    use crate::math::Vec3;

    #[test]
    fn header_has_fixed_columns() {
        let cols: Vec<&str> = CSV_HEADER.split(',').collect();
        assert_eq!(cols.len(), 25);
        assert_eq!(cols[0], "run_id");
        assert_eq!(cols[18], "popstreak_4plus");
        assert_eq!(cols[24], "max_nodes_per_ray");
    }

    #[test]
    fn row_has_header_width_and_blank_absent_metrics() {
        let l = StatsLedger {
            cycles: 10,
            ..StatsLedger::default()
        };
        let row = CsvRow {
            run_id: "x".into(),
            policy: PrefetchPolicy::Off,
            ledger: l.clone(),
            baseline: l,
        };
        let line = row.to_csv().unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 25);
        assert_eq!(fields[3], "1.000000");
        assert_eq!(fields[4], "");
    }

    #[test]
    fn one_pixel_ppm() {
        let buf = HitBuffer {
            width: 1,
            height: 1,
            pixels: vec![HitRecord::miss()],
        };
        assert_eq!(encode_ppm(&buf), b"P6\n1 1\n255\n\0\0\0".to_vec());
    }

    #[test]
    fn hit_pixels_are_not_black() {
        for id in 0..10_000 {
            assert_ne!(primitive_color(id), [0, 0, 0]);
        }
        let hit = HitRecord {
            hit: true,
            t: 1.0,
            primitive_id: 3,
            point: Vec3::ZERO,
            normal: Vec3::ZERO,
        };
        let buf = HitBuffer {
            width: 2,
            height: 1,
            pixels: vec![hit, HitRecord::miss()],
        };
        let ppm = encode_ppm(&buf);
        assert_eq!(&ppm[ppm.len() - 3..], &[0, 0, 0]);
        assert_eq!(&ppm[ppm.len() - 6..ppm.len() - 3], &primitive_color(3));
    }

    #[test]
    fn empty_sweep_rejected() {
        assert!(matches!(
            run_sweep(&SimConfig::default(), SweepAxis::BfsDistance, &[]),
            Err(Error::EmptySweep(_))
        ));
    }

    #[test]
    fn axis_names_round_trip() {
        for name in ["intensity", "bfs_distance", "arbitration", "cache_size", "resolution"] {
            assert_eq!(name.parse::<SweepAxis>().unwrap().name(), name);
        }
        assert!("colour".parse::<SweepAxis>().is_err());
    }
}
