use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Figure, RgbMethod, SweepConfig};
use super::CliError;
use crate::geometry::RgbEstimator;
use crate::mac_sim::{run_simulation, EventLog, OutcomeCounts};
use crate::metrics::{aggregate, mean_of, record_rgbs, GridPoint, MeanRgb, OutcomeProbabilities, RunSummary, SweepSummary};
use crate::scenario::{build_scenario, TrafficConfig};

pub const SUMMARY_HEADER: &str = "density,ibi_ms,cw,wifi,mean_rgb,ci95,p_dlvy,p_exp,p_sync,p_hn,packets,seeds";
const RUNS_HEADER: &str = "density,ibi_us,cw,wifi,seed_index,dlvy,exp,sync,hn,mean_rgb,standard_error";

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const RESOLVED_FILE: &str = "resolved_config.toml";
pub const METADATA_FILE: &str = "metadata.toml";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub figure: Figure,
    pub resume: bool,
    /// Print one line per finished grid point to stderr.
    pub progress: bool,
}

/// Identifies one run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunId {
    pub point: GridPoint,
    pub seed_index: u32,
    /// Seed for the vehicle placement. Shared by every grid point with the
    /// same density and seed index.
    pub placement_seed: u64,
    /// Seed for the MAC and RGB random streams.
    pub run_seed: u64,
}

impl RunId {
    pub fn label(&self) -> String {
        let p = &self.point;
        format!(
            "d{}_ibi{}_cw{}_{}_s{}",
            p.density,
            p.ibi_ms(),
            p.cw,
            if p.wifi { "on" } else { "off" },
            self.seed_index
        )
    }
}

/// Sees every finished run before it is reduced to a summary. Called from
/// worker threads.
pub trait RunObserver: Sync {
    fn observe(&self, id: &RunId, log: &EventLog, rgbs: &[f64]);
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub summaries: Vec<SweepSummary>,
    pub executed_runs: usize,
    pub resumed_points: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0, |h, &w| splitmix64(h ^ w))
}

pub fn run_id(base_seed: u64, point: GridPoint, seed_index: u32) -> RunId {
    let s = seed_index as u64;
    RunId {
        point,
        seed_index,
        placement_seed: base_seed ^ mix(&[1, point.density as u64, s]),
        run_seed: base_seed ^ mix(&[2, point.density as u64, point.ibi_us, point.cw as u64, point.wifi as u64, s]),
    }
}

/// Executes one run and reduces it to a summary, checking the per-run
/// invariants on the way.
pub fn execute_run(
    config: &SweepConfig,
    id: &RunId,
    observer: Option<&dyn RunObserver>,
    trace_dir: Option<&Path>,
) -> Result<RunSummary, CliError> {
    let road = config.road();
    let traffic = TrafficConfig::from_total(id.point.density, &road).map_err(|e| CliError::Config(e.to_string()))?;
    let scenario = build_scenario(road, traffic, config.ap(), config.radio(), id.placement_seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let params = config.run_params(&id.point);
    let log = run_simulation(&scenario, &params, id.run_seed).map_err(|e| CliError::Config(e.to_string()))?;

    let mut est = estimator(config, id.run_seed);
    let rgbs = record_rgbs(&log, &scenario.geometry, &mut est).map_err(|e| CliError::Invariant(e.to_string()))?;
    if let Some(obs) = observer {
        obs.observe(id, &log, &rgbs);
    }
    if let Some(dir) = trace_dir {
        let path = dir.join(format!("{}.trace", id.label()));
        let mut est = estimator(config, id.run_seed);
        let mut out = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
        log.write_trace(&id.label(), &mut est, &mut out)
            .and_then(|_| out.flush())
            .map_err(|e| CliError::io(&path, e))?;
    }

    let counts = log.counts();
    if counts.total() != log.generated {
        return Err(CliError::Invariant(format!(
            "{}: {} records for {} generated BSMs",
            id.label(),
            counts.total(),
            log.generated
        )));
    }
    let mean = mean_of(&rgbs).map_err(|e| CliError::Invariant(format!("{}: {e}", id.label())))?;
    let summary = RunSummary {
        point: id.point,
        seed_index: id.seed_index,
        counts,
        mean,
    };
    check_run(id, &summary)?;
    Ok(summary)
}

fn estimator(config: &SweepConfig, run_seed: u64) -> RgbEstimator<ChaCha8Rng> {
    match config.rgb_method {
        RgbMethod::Exact => RgbEstimator::Exact,
        RgbMethod::MonteCarlo => RgbEstimator::MonteCarlo {
            samples: config.rgb_samples,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(run_seed)),
        },
    }
}

fn check_run(id: &RunId, s: &RunSummary) -> Result<(), CliError> {
    let p = OutcomeProbabilities::from_counts(&s.counts).map_err(|e| CliError::Invariant(e.to_string()))?;
    if p.sum() != 1.0 {
        return Err(CliError::Invariant(format!("{}: probabilities sum to {}", id.label(), p.sum())));
    }
    if !(s.mean.value >= p.p_dlvy && s.mean.value <= 1.0) {
        return Err(CliError::Invariant(format!(
            "{}: mean RGB {} outside [{}, 1]",
            id.label(),
            s.mean.value,
            p.p_dlvy
        )));
    }
    Ok(())
}

/// Runs every planned grid point and writes `summary.csv`, `runs.csv`,
/// the resolved config and a metadata file to `config.out_dir`.
pub fn run_sweep(config: &SweepConfig, options: &SweepOptions) -> Result<SweepOutcome, CliError> {
    run_sweep_with(config, options, None)
}

pub fn run_sweep_with(
    config: &SweepConfig,
    options: &SweepOptions,
    observer: Option<&dyn RunObserver>,
) -> Result<SweepOutcome, CliError> {
    config.validate()?;
    let started = unix_now();
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join(RESOLVED_FILE), &config.to_toml())?;
    let trace_dir = config.trace.then(|| out.join(TRACE_DIR));
    if let Some(dir) = &trace_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }

    let grid = config.grid(options.figure);
    let fingerprint = config.fingerprint();
    let runs_path = out.join(RUNS_FILE);
    let mut done: BTreeMap<GridPoint, Vec<RunSummary>> = BTreeMap::new();
    if options.resume && runs_path.exists() {
        done = read_runs(&runs_path, fingerprint)?;
        done.retain(|p, runs| grid.contains(p) && runs.len() == config.seeds as usize);
    }
    let resumed_points = done.len();
    let todo: Vec<RunId> = grid
        .iter()
        .filter(|p| !done.contains_key(p))
        .flat_map(|&p| (0..config.seeds).map(move |k| run_id(config.base_seed, p, k)))
        .collect();

    // start the progress file over with only the complete points
    {
        let mut w = BufWriter::new(File::create(&runs_path).map_err(|e| CliError::io(&runs_path, e))?);
        write_runs_header(&mut w, fingerprint).map_err(|e| CliError::io(&runs_path, e))?;
        for runs in done.values() {
            for r in runs {
                writeln!(w, "{}", run_line(r)).map_err(|e| CliError::io(&runs_path, e))?;
            }
        }
        w.flush().map_err(|e| CliError::io(&runs_path, e))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let executed_runs = todo.len();
    let points_total = grid.len();
    let seeds = config.seeds as usize;

    let (tx, rx) = mpsc::channel::<Result<RunSummary, CliError>>();
    let collected: Result<(), CliError> = std::thread::scope(|scope| {
        let trace_dir = trace_dir.as_deref();
        scope.spawn(move || {
            pool.install(|| {
                todo.par_iter().for_each_with(tx, |tx, id| {
                    let _ = tx.send(execute_run(config, id, observer, trace_dir));
                });
            });
        });

        let mut file = OpenOptions::new()
            .append(true)
            .open(&runs_path)
            .map_err(|e| CliError::io(&runs_path, e))?;
        let mut pending: BTreeMap<GridPoint, Vec<RunSummary>> = BTreeMap::new();
        let mut first_error = None;
        for result in rx {
            let run = match result {
                Ok(run) => run,
                Err(e) => {
                    first_error.get_or_insert(e);
                    continue;
                }
            };
            let slot = pending.entry(run.point).or_default();
            slot.push(run);
            if slot.len() == seeds {
                let mut runs = pending.remove(&run.point).expect("just inserted");
                runs.sort_by_key(|r| r.seed_index);
                let text: String = runs.iter().map(|r| run_line(r) + "\n").collect();
                file.write_all(text.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| CliError::io(&runs_path, e))?;
                done.insert(run.point, runs);
                if options.progress {
                    eprintln!("[{}/{}] {}", done.len(), points_total, run.point);
                }
            }
        }
        first_error.map_or(Ok(()), Err)
    });
    collected?;

    let summaries = grid
        .iter()
        .map(|p| aggregate(&done[p]).map_err(|e| CliError::Invariant(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;

    // rewrite the progress file in grid order so it is reproducible too
    let mut body = runs_header(fingerprint);
    for s in &summaries {
        for r in &s.per_seed {
            body.push_str(&run_line(r));
            body.push('\n');
        }
    }
    write_file(&runs_path, &body)?;
    write_file(&out.join(SUMMARY_FILE), &summary_csv(&summaries))?;
    write_file(
        &out.join(METADATA_FILE),
        &format!(
            "version = \"{}\"\nstarted_unix = {started}\nfinished_unix = {}\nworkers = {}\nexecuted_runs = {executed_runs}\nresumed_points = {resumed_points}\n",
            env!("CARGO_PKG_VERSION"),
            unix_now(),
            rayon_threads(config.workers),
        ),
    )?;

    Ok(SweepOutcome {
        summaries,
        executed_runs,
        resumed_points,
    })
}

fn rayon_threads(workers: usize) -> usize {
    if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::io(path, e))
}

fn runs_header(fingerprint: u64) -> String {
    format!("# config {fingerprint:016x}\n{RUNS_HEADER}\n")
}

fn write_runs_header<W: Write>(w: &mut W, fingerprint: u64) -> std::io::Result<()> {
    w.write_all(runs_header(fingerprint).as_bytes())
}

fn onoff(wifi: bool) -> &'static str {
    if wifi {
        "on"
    } else {
        "off"
    }
}

fn run_line(r: &RunSummary) -> String {
    let p = &r.point;
    let c = &r.counts;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        p.density,
        p.ibi_us,
        p.cw,
        onoff(p.wifi),
        r.seed_index,
        c.dlvy,
        c.exp,
        c.sync,
        c.hn,
        r.mean.value,
        r.mean.standard_error
    )
}

fn parse_run_line(line: &str) -> Option<RunSummary> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 11 {
        return None;
    }
    let counts = OutcomeCounts {
        dlvy: f[5].parse().ok()?,
        exp: f[6].parse().ok()?,
        sync: f[7].parse().ok()?,
        hn: f[8].parse().ok()?,
    };
    Some(RunSummary {
        point: GridPoint {
            density: f[0].parse().ok()?,
            ibi_us: f[1].parse().ok()?,
            cw: f[2].parse().ok()?,
            wifi: match f[3] {
                "on" => true,
                "off" => false,
                _ => return None,
            },
        },
        seed_index: f[4].parse().ok()?,
        mean: MeanRgb {
            value: f[9].parse().ok()?,
            packet_count: counts.total(),
            standard_error: f[10].parse().ok()?,
        },
        counts,
    })
}

/// Complete and partial points recorded in a progress file. A torn last
/// line is ignored.
fn read_runs(path: &PathBuf, fingerprint: u64) -> Result<BTreeMap<GridPoint, Vec<RunSummary>>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let expected = format!("# config {fingerprint:016x}");
    match lines.next() {
        Some(Ok(first)) if first == expected => {}
        Some(Ok(_)) => {
            return Err(CliError::Config(format!(
                "{} was written with different settings; remove it or drop --resume",
                path.display()
            )))
        }
        _ => return Ok(BTreeMap::new()),
    }
    let mut out: BTreeMap<GridPoint, Vec<RunSummary>> = BTreeMap::new();
    for line in lines {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if let Some(r) = parse_run_line(&line) {
            let runs = out.entry(r.point).or_default();
            if runs.iter().all(|x| x.seed_index != r.seed_index) {
                runs.push(r);
            }
        }
    }
    Ok(out)
}

/// The summary table, one row per grid point in grid order.
pub fn summary_csv(summaries: &[SweepSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let p = &s.point;
        let q = &s.probabilities;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.density,
            p.ibi_ms(),
            p.cw,
            onoff(p.wifi),
            s.pooled_mean,
            s.ci95.map_or_else(|| "NA".to_string(), |c| c.to_string()),
            q.p_dlvy,
            q.p_exp,
            q.p_sync,
            q.p_hn,
            s.packets,
            s.seeds()
        ));
    }
    out
}
