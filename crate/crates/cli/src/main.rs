//! Command-line driver: runs one experiment (baseline plus the selected
//! policy) or a parameter sweep and writes CSV, image and trace outputs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use ttpsim::report::{dump_image, to_csv, CsvRow};
use ttpsim::rtunit::write_trace;
use ttpsim::sim::build_bvh;
use ttpsim::{
    parse_config, run_sweep, run_with_bvh, PrefetchPolicy, RunOptions, SceneSource, SimConfig,
    SweepAxis, TraversalOrder,
};

#[derive(Debug, Parser)]
#[command(name = "ttpsim", version, about = "Cycle-level ray-tracing unit simulator with a tree traversal prefetcher")]
struct Args {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// OBJ path or `synthetic:<grid|random-boxes|deep-branch>[:<triangles>[:<seed>]]`.
    #[arg(long)]
    scene: Option<String>,

    /// off, ttp-dfs, ttp-bfs, park-leaf, perfect-upward or perfect-downward.
    #[arg(long)]
    policy: Option<PrefetchPolicy>,

    /// `<axis>=<v1,v2,...>` over intensity, bfs_distance, arbitration,
    /// cache_size or resolution.
    #[arg(long)]
    sweep: Option<String>,

    /// Extra config overrides, same keys as the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// CSV destination; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Binary PPM of the primary-ray hits.
    #[arg(long)]
    image: Option<PathBuf>,

    /// Stack event trace, one event per line.
    #[arg(long)]
    trace: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
}

fn build_config(args: &Args) -> Result<SimConfig> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(path).with_context(|| format!("reading {}", path.display()))?,
        None => SimConfig::default(),
    };
    if let Some(scene) = &args.scene {
        cfg.scene = scene.parse::<SceneSource>().map_err(anyhow::Error::msg)?;
    }
    if let Some(policy) = args.policy {
        cfg.prefetch.policy = policy;
        // Queue lookahead only exists in BFS; stack policies need DFS.
        match policy {
            PrefetchPolicy::TtpBfs => cfg.rt.traversal_order = TraversalOrder::Bfs,
            PrefetchPolicy::TtpDfs | PrefetchPolicy::ParkLeaf => cfg.rt.traversal_order = TraversalOrder::Dfs,
            _ => {}
        }
    }
    for kv in &args.overrides {
        let Some((key, value)) = kv.split_once('=') else {
            bail!("override {kv:?} is not KEY=VALUE");
        };
        cfg.set(key.trim(), value.trim())
            .map_err(|e| anyhow::anyhow!("--set {kv}: {e}"))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sweep(spec: &str) -> Result<(SweepAxis, Vec<String>)> {
    let Some((axis, values)) = spec.split_once('=') else {
        bail!("sweep {spec:?} is not <axis>=<v1,v2,...>");
    };
    let axis: SweepAxis = axis.trim().parse().map_err(anyhow::Error::msg)?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    Ok((axis, values))
}

fn emit_csv(rows: &[CsvRow], out: Option<&PathBuf>) -> Result<()> {
    let csv = to_csv(rows)?;
    match out {
        Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display())),
        None => io::stdout().write_all(csv.as_bytes()).context("writing CSV to stdout"),
    }
}

fn run(args: &Args) -> Result<bool> {
    let cfg = build_config(args)?;
    let bvh = build_bvh(&cfg)?;
    let options = RunOptions {
        trace: args.trace.is_some(),
    };

    let mut ok = true;
    let (rows, output) = match &args.sweep {
        Some(spec) => {
            let (axis, values) = parse_sweep(spec)?;
            let result = run_sweep(&cfg, axis, &values)?;
            for (value, err) in &result.failures {
                eprintln!("sweep point {}={value} failed: {err}", axis.name());
                ok = false;
            }
            let output = if args.image.is_some() || args.trace.is_some() {
                Some(run_with_bvh(&cfg, &bvh, options)?)
            } else {
                None
            };
            (result.rows, output)
        }
        None => {
            let baseline = run_with_bvh(&cfg.baseline(), &bvh, RunOptions::default())?;
            let mut rows = vec![CsvRow {
                run_id: "baseline".into(),
                policy: PrefetchPolicy::Off,
                ledger: baseline.ledger.clone(),
                baseline: baseline.ledger.clone(),
            }];
            let output = if cfg.prefetch.policy == PrefetchPolicy::Off {
                if options.trace {
                    run_with_bvh(&cfg, &bvh, options)?
                } else {
                    baseline
                }
            } else {
                let run = run_with_bvh(&cfg, &bvh, options)?;
                rows.push(CsvRow {
                    run_id: cfg.prefetch.policy.name().into(),
                    policy: cfg.prefetch.policy,
                    ledger: run.ledger.clone(),
                    baseline: rows[0].ledger.clone(),
                });
                run
            };
            (rows, Some(output))
        }
    };

    emit_csv(&rows, args.out.as_ref())?;
    if let Some(output) = output {
        if let Some(path) = &args.image {
            dump_image(&output.hits, path)?;
        }
        if let Some(path) = &args.trace {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            write_trace(&mut w, output.trace.as_deref().unwrap_or_default())?;
            w.flush()?;
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
