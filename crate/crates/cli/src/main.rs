use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use velosense::allocation::lp::export_lp;
use velosense::allocation::{
    build_instance, random_allocation, solve_exact, solve_greedy, AllocationPlan, MilpInstance,
};
use velosense::coverage_model::{
    estimate_probabilities, mean_coverage, probability_decay_report, CoverageMatrix,
};
use velosense::fleet_sim::{
    initial_bike_counts, read_trajectories, simulate, write_trajectories, BikeId, FleetPlan,
    SimConfig,
};
use velosense::harness::{
    beta_sweep, cells, dump_cell, run_experiment, sensor_requirement, ExperimentSpec, Scenario,
};
use velosense::metrics::{hourly_diagnostics, sensing_report, IntervalGrid};
use velosense::network::{write_network, RoadNetwork};
use velosense::synth::{generate, SynthConfig};
use velosense::trips::{clean_trips, parse_raw_trips, write_raw_trips, CleanParams, StandId, TripLog};

const NODES: &str = "nodes.csv";
const EDGES: &str = "edges.csv";
const RAW_TRIPS: &str = "trips.csv";
const TRIPLOG: &str = "triplog.json";
const FLEET: &str = "fleet.json";
const PROBS: &str = "probs.csv";
const PROBS_META: &str = "probs_meta.json";
const ALLOCATION: &str = "allocation.json";
const TRAJECTORIES: &str = "trajectories.json";

#[derive(Parser)]
#[command(name = "velosense", version, about = "Sensor placement for bike-sharing fleets")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory holding inputs produced by earlier stages and receiving outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// JSON configuration: cleaning parameters for `ingest`, generator
    /// settings for `synth`, experiment spec for `experiment`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a raw trip file against a road network into a trip log.
    Ingest {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        trips: PathBuf,
    },
    /// Generate a synthetic grid city with raw trips, then ingest it.
    Synth {
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long, default_value_t = 200.0)]
        block_m: f64,
        #[arg(long, default_value_t = 50)]
        stands: usize,
        #[arg(long, default_value_t = 20_000)]
        trips: usize,
        #[arg(long, default_value_t = 1.5)]
        gamma: f64,
    },
    /// Minimal initial bikes per stand.
    Fleet,
    /// Estimate per-bike visit expectations by passive replay.
    Probs {
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Also write distance-sorted expectations for this stand.
        #[arg(long)]
        decay_stand: Option<usize>,
    },
    /// Place a sensor budget on stands.
    Allocate {
        #[arg(long)]
        budget: u32,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, value_enum, default_value_t = SolverArg::Greedy)]
        solver: SolverArg,
        #[arg(long, default_value_t = 60.0)]
        time_limit_s: f64,
    },
    /// Write the allocation model as LP text for an external solver.
    ExportLp {
        #[arg(long)]
        budget: u32,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value = "model.lp")]
        output: PathBuf,
    },
    /// Replay the day with equipped bikes and guidance acceptance beta.
    Simulate {
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Allocation to equip; defaults to allocation.json in the out dir.
        #[arg(long)]
        allocation: Option<PathBuf>,
    },
    /// Sensing score of stored trajectories.
    Score {
        /// Sensing interval in hours.
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Also write hourly trip and coverage counts.
        #[arg(long)]
        hourly: bool,
    },
    /// Run a sweep described by the --config experiment spec.
    Experiment {
        /// Additionally report the smallest budget reaching this score (%).
        #[arg(long)]
        target: Option<f64>,
        /// Also write gains between consecutive betas.
        #[arg(long)]
        beta_gains: bool,
        /// Write the network, trip log, and every cell's allocation and
        /// trajectories under the out dir, for offline re-scoring.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Greedy,
    Exact,
    Random,
}

fn open(dir: &Path, name: &str) -> anyhow::Result<BufReader<File>> {
    let path = dir.join(name);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(velosense::Error::from)?)
}

fn load_network(dir: &Path) -> anyhow::Result<RoadNetwork> {
    Ok(RoadNetwork::load(open(dir, NODES)?, open(dir, EDGES)?)?)
}

fn load_log(dir: &Path) -> anyhow::Result<TripLog> {
    Ok(TripLog::read_json(open(dir, TRIPLOG)?)?)
}

fn load_fleet(dir: &Path, log: &TripLog) -> anyhow::Result<FleetPlan> {
    if dir.join(FLEET).exists() {
        Ok(FleetPlan::read_json(open(dir, FLEET)?)?)
    } else {
        Ok(initial_bike_counts(log))
    }
}

fn load_instance(dir: &Path, budget: u32, k: f64) -> anyhow::Result<MilpInstance> {
    if budget == 0 || !(k > 0.0) {
        return Err(velosense::Error::ConfigInfeasible(format!(
            "need budget >= 1 and K > 0, got budget {budget}, K {k}"
        ))
        .into());
    }
    let net = load_network(dir)?;
    let log = load_log(dir)?;
    let fleet = load_fleet(dir, &log)?;
    let matrix = CoverageMatrix::read(open(dir, PROBS)?, open(dir, PROBS_META)?)?;
    let inst = build_instance(&matrix, &net, &fleet, budget, k)?;
    for w in &inst.warnings {
        log::warn!("{w}");
    }
    Ok(inst)
}

fn ingest(out: &Path, net: RoadNetwork, raw_src: impl std::io::Read, params: &CleanParams) -> anyhow::Result<()> {
    let (raw, parse) = parse_raw_trips(raw_src)?;
    let (log, report) = clean_trips(&raw, &net, params)?;
    log.write_json(create(out, TRIPLOG)?)?;
    serde_json::to_writer_pretty(
        create(out, "clean_report.json")?,
        &serde_json::json!({ "parse": parse, "clean": report }),
    )?;
    println!(
        "kept {} of {} trips ({} unparsable), {} stands",
        report.kept, report.input, parse.dropped(), report.stands
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Ingest { nodes, edges, trips } => {
            let params: CleanParams = match &cli.config {
                Some(p) => read_config(p)?,
                None => CleanParams::default(),
            };
            let net = RoadNetwork::load_files(&nodes, &edges)?;
            write_network(&net, create(out, NODES)?, create(out, EDGES)?)?;
            let f = File::open(&trips).with_context(|| format!("opening {}", trips.display()))?;
            ingest(out, net, BufReader::new(f), &params)?;
        }
        Command::Synth { grid, block_m, stands, trips, gamma } => {
            let cfg: SynthConfig = match &cli.config {
                Some(p) => read_config(p)?,
                None => SynthConfig {
                    grid_w: grid,
                    grid_h: grid,
                    block_m,
                    stand_count: stands,
                    trips,
                    gravity_gamma: gamma,
                    ..SynthConfig::reference(cli.seed)
                },
            };
            let city = generate(&cfg)?;
            write_network(&city.network, create(out, NODES)?, create(out, EDGES)?)?;
            let mut buf = Vec::new();
            write_raw_trips(&city.trips, &mut buf)?;
            std::fs::write(out.join(RAW_TRIPS), &buf)?;
            ingest(out, city.network, buf.as_slice(), &CleanParams::default())?;
        }
        Command::Fleet => {
            let log = load_log(out)?;
            let fleet = initial_bike_counts(&log);
            fleet.write_json(create(out, FLEET)?)?;
            println!("{} bikes over {} stands", fleet.total_bikes(), fleet.counts.len());
        }
        Command::Probs { runs, decay_stand } => {
            let log = load_log(out)?;
            let fleet = load_fleet(out, &log)?;
            let sample = mean_coverage(&log, &fleet, runs, cli.seed)?;
            let matrix = estimate_probabilities(&sample, &fleet)?;
            matrix.write_csv(create(out, PROBS)?)?;
            matrix.write_meta(create(out, PROBS_META)?)?;
            println!("{} nonzero stand-segment expectations", matrix.p.len());
            if let Some(s) = decay_stand {
                let net = load_network(out)?;
                let rows = probability_decay_report(&matrix, &net, StandId(s))?;
                let mut w = create(out, &format!("decay_stand{s}.csv"))?;
                use std::io::Write;
                writeln!(w, "segment_id,distance_m,p")?;
                for r in rows {
                    writeln!(w, "{},{},{}", r.segment.0, r.distance_m, r.p)?;
                }
            }
        }
        Command::Allocate { budget, k, solver, time_limit_s } => {
            let inst = load_instance(out, budget, k)?;
            let plan = match solver {
                SolverArg::Greedy => solve_greedy(&inst)?,
                SolverArg::Exact => solve_exact(&inst, time_limit_s)?,
                SolverArg::Random => random_allocation(&inst, cli.seed)?,
            };
            plan.write_json(&inst, create(out, ALLOCATION)?)?;
            println!(
                "{} sensors, expected covered length {:.1} m{}",
                plan.sensors(),
                plan.objective_m,
                plan.gap.map_or(String::new(), |g| format!(", gap {:.4}", g))
            );
        }
        Command::ExportLp { budget, k, output } => {
            let inst = load_instance(out, budget, k)?;
            let path = if output.is_absolute() { output } else { out.join(output) };
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            export_lp(&inst, BufWriter::new(f))?;
            println!("wrote {}", path.display());
        }
        Command::Simulate { beta, allocation } => {
            let log = load_log(out)?;
            let fleet = load_fleet(out, &log)?;
            let alloc_path = allocation.unwrap_or_else(|| out.join(ALLOCATION));
            let f = File::open(&alloc_path)
                .with_context(|| format!("opening {}", alloc_path.display()))?;
            let (_, n) = AllocationPlan::read_counts(BufReader::new(f))?;
            if n.len() != fleet.counts.len() {
                return Err(velosense::Error::malformed(format!(
                    "allocation covers {} stands, trip log has {}",
                    n.len(),
                    fleet.counts.len()
                ))
                .into());
            }
            let cfg = SimConfig { seed: cli.seed, beta, equipped: fleet.equip(&n) };
            let traj = simulate(&log, &fleet, &cfg)?;
            write_trajectories(&log, &cfg, &traj, create(out, TRAJECTORIES)?)?;
            println!("{} bikes replayed, {} equipped", traj.len(), cfg.equipped.len());
        }
        Command::Score { delta, trajectories, hourly } => {
            let net = load_network(out)?;
            let log = load_log(out)?;
            let path = trajectories.unwrap_or_else(|| out.join(TRAJECTORIES));
            let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let (meta, traj) = read_trajectories(&log, BufReader::new(f))?;
            let equipped = meta.equipped.iter().copied().collect::<std::collections::BTreeSet<BikeId>>();
            let grid = IntervalGrid::for_log(&log, delta)?;
            let report = sensing_report(&traj, &equipped, &net.lengths(), &grid)?;
            report.counts.write_csv(create(out, "coverage_counts.csv")?)?;
            serde_json::to_writer_pretty(create(out, "score.json")?, &report)?;
            println!("phi = {:.4} %", report.phi_pct);
            if hourly {
                let diag = hourly_diagnostics(&traj, &equipped, &log)?;
                diag.write_csv(create(out, "hourly.csv")?)?;
                diag.write_segment_csv(create(out, "hourly_segments.csv")?)?;
                match diag.correlation {
                    Some(r) => println!("hourly trips vs coverage: r = {r:.3}"),
                    None => println!("hourly correlation undefined"),
                }
            }
        }
        Command::Experiment { target, beta_gains, dump } => {
            let Some(p) = &cli.config else {
                bail!(velosense::Error::ConfigInfeasible("experiment needs --config".into()));
            };
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let spec = ExperimentSpec::from_json(&text)?;
            let scenario = Scenario::prepare(&spec)?;
            let result = run_experiment(&scenario, &spec)?;
            result.write_rows(create(out, "results.csv")?)?;
            result.write_summary(create(out, "summary.csv")?)?;
            for r in &result.summary {
                println!(
                    "{:<18} budget {:>5} delta {:>5} beta {:>4}: {:.3} ± {:.3} %",
                    r.method.name(),
                    r.budget,
                    r.delta_h,
                    r.beta,
                    r.mean_phi_pct,
                    r.std_phi_pct
                );
            }
            if dump {
                write_network(&scenario.network, create(out, NODES)?, create(out, EDGES)?)?;
                scenario.log.write_json(create(out, TRIPLOG)?)?;
                scenario.fleet.write_json(create(out, FLEET)?)?;
                for cell in cells(&spec) {
                    dump_cell(&scenario, &spec, cell, &out.join("cells"))?;
                }
            }
            if beta_gains {
                beta_sweep(&scenario, &spec)?.write_gains(create(out, "beta_gains.csv")?)?;
            }
            if let Some(t) = target {
                let req = sensor_requirement(&scenario, &spec, t)?;
                serde_json::to_writer_pretty(create(out, "requirement.json")?, &req)?;
                for r in &req {
                    match r.budget {
                        Some(b) => println!("delta {} h: {b} sensors reach {t} %", r.delta_h),
                        None => println!("delta {} h: {t} % unattainable with the whole fleet", r.delta_h),
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<velosense::Error>())
                .map(velosense::Error::exit_code)
                .or_else(|| {
                    e.chain()
                        .any(|c| c.is::<std::io::Error>())
                        .then_some(2)
                })
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
