//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 failure while running.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use kvsched::config::{read_trace_file, RunConfig};
use kvsched::kvcache::{parse_capacity, Capacity, EvictionPolicy};
use kvsched::reports::{self, CompareAxis, DEFAULT_CAPACITIES};
use kvsched::trace::{generate_workload, trace_stats, write_trace, LengthDist, WorkloadSpec};
use kvsched::{run, Error};

#[derive(Parser)]
#[command(name = "kvsched", version, about = "Replay LLM serving traces against a disaggregated cluster model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL trace; replaces any trace or workload in the config.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Divide every arrival timestamp by this factor.
    #[arg(long)]
    speedup: Option<f64>,
    /// Seed for random scheduling and generated workloads.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "KVSCHED_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Scheduler,
    Admission,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write the report, CDFs and per-request table.
    Replay(RunArgs),
    /// Run every variant along one axis on the same trace.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated variants; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Hit ratio of each eviction policy over a range of pool capacities.
    AnalyzeCache {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated, e.g. `LRUCache,LFUCache`.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        /// Comma-separated block counts; `inf` is unbounded.
        #[arg(long, value_delimiter = ',')]
        capacities: Vec<String>,
        #[arg(long, env = "KVSCHED_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Write a synthetic trace as JSONL.
    Generate {
        /// Takes the `[workload]` table from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Poisson arrival rate in requests per second.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        requests: Option<usize>,
        /// Prompt length in tokens.
        #[arg(long)]
        input_len: Option<u32>,
        #[arg(long)]
        output_len: Option<u32>,
        /// Fraction of each prompt's blocks taken from a shared prefix.
        #[arg(long)]
        cache_ratio: Option<f64>,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Separates bad input (exit 2) from failures after the inputs were accepted (exit 3).
enum Failure {
    Usage(Error),
    Runtime(Error),
}

fn usage<T>(r: kvsched::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: kvsched::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Replay(args) => cmd_replay(args),
        Command::Compare { run, axis, variants } => cmd_compare(run, axis, variants),
        Command::AnalyzeCache {
            trace,
            policies,
            capacities,
            out,
        } => cmd_analyze_cache(&trace, &policies, &capacities, out),
        Command::Generate {
            config,
            seed,
            rate,
            requests,
            input_len,
            output_len,
            cache_ratio,
            out,
        } => cmd_generate(config, seed, rate, requests, input_len, output_len, cache_ratio, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn load_config(args: &RunArgs) -> kvsched::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &args.trace {
        cfg.set_trace_path(path.clone());
    }
    if let Some(s) = args.speedup {
        cfg.speedup = s;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_replay(args: RunArgs) -> Result<(), Failure> {
    let cfg = usage(load_config(&args))?;
    let trace = usage(cfg.load_trace())?;
    let sim = usage(cfg.sim_config(&trace))?;
    info!("trace sha256 {}", reports::trace_digest(&trace));
    let report = runtime(run(&trace, &sim))?;
    let dir = out_dir(&cfg);
    let written = runtime(reports::write_replay(&dir, &cfg, &report))?;
    println!(
        "{} requests: goodput {}, SLO attainment {:.3}, mean TTFT {}, rejected {}+{}",
        report.arrived,
        report.goodput,
        report.slo_attainment,
        report.mean_ttft.map_or("-".into(), |t| format!("{t:.1} ms")),
        report.rejected_at_admission,
        report.rejected_at_decode,
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_compare(args: RunArgs, axis: Axis, variants: Vec<String>) -> Result<(), Failure> {
    let cfg = usage(load_config(&args))?;
    let axis = match axis {
        Axis::Scheduler => CompareAxis::Scheduler,
        Axis::Admission => CompareAxis::Admission,
    };
    let variants = if variants.is_empty() { axis.all_variants() } else { variants };
    // Reject bad variant names and missing traces before any simulation starts.
    for v in &variants {
        match axis {
            CompareAxis::Scheduler => usage(v.parse::<kvsched::conductor::SchedulerChoice>().map(drop))?,
            CompareAxis::Admission => usage(v.parse::<kvsched::overload::AdmissionPolicy>().map(drop))?,
        }
    }
    let trace = usage(cfg.load_trace())?;
    usage(cfg.sim_config(&trace))?;
    let rows = runtime(reports::compare(&cfg, axis, &variants))?;
    let csv = reports::compare_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &cfg.out_dir {
        runtime(std::fs::create_dir_all(dir).map_err(Error::from))?;
        runtime(std::fs::write(dir.join("compare.csv"), &csv).map_err(Error::from))?;
    }
    Ok(())
}

fn cmd_analyze_cache(trace: &Path, policies: &[String], capacities: &[String], out: Option<PathBuf>) -> Result<(), Failure> {
    let policies: Vec<EvictionPolicy> = if policies.is_empty() {
        EvictionPolicy::ALL.to_vec()
    } else {
        usage(policies.iter().map(|p| p.parse()).collect())?
    };
    let capacities: Vec<Capacity> = if capacities.is_empty() {
        DEFAULT_CAPACITIES.to_vec()
    } else {
        usage(capacities.iter().map(|c| parse_capacity(c)).collect())?
    };
    let records = usage(read_trace_file(trace))?;
    let stats = trace_stats(&records);
    info!(
        "{} requests, mean input {:.0}, mean output {:.0}",
        stats.requests, stats.mean_input_length, stats.mean_output_length
    );
    let grid = runtime(reports::analyze_cache(&records, &policies, &capacities))?;
    let csv = grid.to_csv();
    print!("{csv}");
    println!("unused_block_fraction,{:.4}", reports::unused_fraction(&records));
    if let Some(dir) = out {
        runtime(std::fs::create_dir_all(&dir).map_err(Error::from))?;
        runtime(std::fs::write(dir.join("hit_ratios.csv"), &csv).map_err(Error::from))?;
        runtime(std::fs::write(dir.join("popularity_cdf.csv"), reports::popularity_csv(&records)).map_err(Error::from))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config: Option<PathBuf>,
    seed: Option<u64>,
    rate: Option<f64>,
    requests: Option<usize>,
    input_len: Option<u32>,
    output_len: Option<u32>,
    cache_ratio: Option<f64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut spec = match config {
        Some(path) => {
            let cfg = usage(RunConfig::load(&path))?;
            usage(cfg.workload.ok_or_else(|| Error::Config(format!("{} has no [workload] table", path.display()))))?
        }
        None => WorkloadSpec::poisson(1.0, 8192, 256, 0.5, 1000, 0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(r) = rate {
        spec.arrival = kvsched::trace::ArrivalProcess::Poisson { rate_rps: r };
    }
    if let Some(n) = requests {
        spec.request_count = n;
    }
    if let Some(n) = input_len {
        spec.input_length = LengthDist::Fixed(n);
    }
    if let Some(n) = output_len {
        spec.output_length = LengthDist::Fixed(n);
    }
    if let Some(c) = cache_ratio {
        spec.cache_ratio = c;
    }
    let records = usage(generate_workload(&spec))?;
    match out {
        Some(path) => {
            let file = runtime(std::fs::File::create(&path).map_err(Error::from))?;
            runtime(write_trace(&records, std::io::BufWriter::new(file)))?;
            info!("wrote {} requests to {}", records.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout().lock();
            let mut w = std::io::BufWriter::new(stdout);
            runtime(write_trace(&records, &mut w))?;
            runtime(w.flush().map_err(Error::from))?;
        }
    }
    Ok(())
}
