#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use servesim::autoscaler::LoadPath;
use servesim::cluster::simulate;
use servesim::config::{read_heatmap, Config};
use servesim::dsched::Policy;
use servesim::experiments::{
    default_scale_plan, profile_heatmap, run_scale_plan, write_profiles_csv, write_scale_csv,
    write_timelines_csv,
};
use servesim::workload::{generate_trace, load_trace, save_trace};

#[derive(Parser)]
#[command(name = "servesim", version, about = "Serverless LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML config; omitted means built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Profile colocated vs disaggregated JCT per cell and write the heatmap.
    ProfileHeatmap {
        #[command(flatten)]
        common: Common,
        /// Comma-separated request rates, e.g. 1,1.5,2.
        #[arg(long)]
        rps_grid: Option<String>,
    },
    /// Simulate a trace (or the config workload) and write metrics.
    Run {
        #[command(flatten)]
        common: Common,
        /// rr, load, locality, pd or combined.
        #[arg(long)]
        policy: Option<String>,
        /// JSON-lines trace; omitted means generate from the config workload.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Heatmap JSON; overrides the config.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Time engine scale-up along each load path.
    ScaleBench {
        #[command(flatten)]
        common: Common,
        /// auto, dram-hit, dram-miss, fork-hccs or fork-roce.
        #[arg(long)]
        path: Option<String>,
        /// Comma-separated engine counts.
        #[arg(long)]
        n: Option<String>,
    },
    /// Write the config workload as a JSON-lines trace.
    GenTrace {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(c: &Common) -> Result<Config, Failure> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).map_err(config_err)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| config_err(anyhow!("bad {what} value `{x}`")))
        })
        .collect()
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime_err)?;
    let p = dir.join(name);
    File::create(&p)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", p.display()))
        .map_err(runtime_err)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, v: &T) -> Result<(), Failure> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(runtime_err)?;
    std::io::Write::write_all(&mut w, b"\n").map_err(runtime_err)
}

fn profile(common: &Common, rps_grid: Option<&str>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(g) = rps_grid {
        cfg.profile.rps_grid = parse_list(g, "rps")?;
        if cfg.profile.rps_grid.iter().any(|r| !(*r > 0.0)) {
            return Err(config_err(anyhow!("rps values must be positive")));
        }
    }
    let (hm, profiles) = profile_heatmap(&cfg.profile_spec()).map_err(runtime_err)?;
    let mut w = create(&common.out_dir, "heatmap.json")?;
    std::io::Write::write_all(&mut w, hm.to_json().map_err(runtime_err)?.as_bytes())
        .map_err(runtime_err)?;
    std::io::Write::write_all(&mut w, b"\n").map_err(runtime_err)?;
    write_profiles_csv(&profiles, create(&common.out_dir, "heatmap_profiles.csv")?)
        .map_err(runtime_err)?;
    println!("sign stability {:.3}", hm.sign_stability());
    Ok(())
}

fn run(
    common: &Common,
    policy: Option<&str>,
    trace: Option<&Path>,
    heatmap: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(p) = policy {
        cfg.cluster.policy =
            Policy::parse(p).ok_or_else(|| config_err(anyhow!("unknown policy `{p}`")))?;
    }
    let hm = heatmap.map(read_heatmap).transpose().map_err(config_err)?;
    let spec = cfg.cluster_spec(hm).map_err(config_err)?;
    let reqs = match trace {
        Some(t) => load_trace(t).map_err(config_err)?,
        None => {
            let w = cfg
                .workload_spec()
                .ok_or_else(|| config_err(anyhow!("no --trace and no [workload] in the config")))?;
            generate_trace(&w).map_err(config_err)?
        }
    };
    let slo = spec.slo;
    let out = simulate(spec, reqs).map_err(runtime_err)?;
    let dir = &common.out_dir;
    out.metrics
        .write_csv(create(dir, "requests.csv")?)
        .map_err(runtime_err)?;
    write_json(dir, "summary.json", &out.metrics.summary(&slo))?;
    write_json(dir, "report.json", &out.report)?;
    write_timelines_csv(&out.report.scaling, create(dir, "scaling.csv")?).map_err(runtime_err)?;
    let s = &out.report.summary;
    println!(
        "completed {}/{} mean JCT {:.1} ms",
        s.completed,
        s.requests,
        s.jct_us.mean / 1e3
    );
    Ok(())
}

fn scale_bench(common: &Common, path: Option<&str>, n: Option<&str>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let plan = match (path, n) {
        (None, None) => default_scale_plan(),
        _ => {
            let p = match path.unwrap_or("auto") {
                "auto" => None,
                s => Some(
                    LoadPath::parse(s)
                        .ok_or_else(|| config_err(anyhow!("unknown load path `{s}`")))?,
                ),
            };
            let ns: Vec<u32> = match n {
                Some(s) => parse_list(s, "n")?,
                None => vec![1],
            };
            if ns.contains(&0) {
                return Err(config_err(anyhow!("n must be at least 1")));
            }
            ns.into_iter().map(|n| (p, n)).collect()
        }
    };
    let rows = run_scale_plan(&cfg.scale_bench, &plan).map_err(runtime_err)?;
    write_scale_csv(&rows, create(&common.out_dir, "scaling.csv")?).map_err(runtime_err)?;
    let timelines: Vec<_> = rows
        .iter()
        .flat_map(|r| r.timelines.iter().cloned())
        .collect();
    write_timelines_csv(
        &timelines,
        create(&common.out_dir, "scaling_timelines.csv")?,
    )
    .map_err(runtime_err)?;
    for r in &rows {
        println!(
            "{:<10} n={:<3} te_load {:>9.3} s  total {:>9.3} s",
            r.path.as_str(),
            r.n,
            r.te_load_us as f64 / 1e6,
            r.max_total_us as f64 / 1e6
        );
    }
    Ok(())
}

fn gen_trace(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let w = cfg
        .workload_spec()
        .ok_or_else(|| config_err(anyhow!("the config has no [workload]")))?;
    let reqs = generate_trace(&w).map_err(config_err)?;
    fs::create_dir_all(&common.out_dir).map_err(runtime_err)?;
    save_trace(&reqs, common.out_dir.join("trace.jsonl")).map_err(runtime_err)?;
    println!("{} requests", reqs.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::ProfileHeatmap { common, rps_grid } => profile(common, rps_grid.as_deref()),
        Cmd::Run {
            common,
            policy,
            trace,
            heatmap,
        } => run(
            common,
            policy.as_deref(),
            trace.as_deref(),
            heatmap.as_deref(),
        ),
        Cmd::ScaleBench { common, path, n } => scale_bench(common, path.as_deref(), n.as_deref()),
        Cmd::GenTrace { common } => gen_trace(common),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
