use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cvr_core::datagen::Generator;
use cvr_core::ingest::{self, CriteoParser};
use cvr_core::learners::{build_learner, Learner, LearnerContext, LearnerSpec};
use cvr_core::pipelines::write_extended_log;
use cvr_core::sim::{best_task_table, feedback_rates, run_simulation, BestTaskRow, SimReport};
use cvr_core::{ImpressionRecord, TaskSchedule, DAY};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, DataKind, Precision, RunConfig};
use crate::{BesttaskArgs, CliError, GenArgs, LogFormat, RunArgs, StatsArgs};

/// Caps the number of seeds run concurrently.
pub const WORKERS_ENV: &str = "CVRSIM_WORKERS";

/// Input dimensions, stored next to generated logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LogMeta {
    dim: u32,
    n_fields: usize,
}

fn meta_path(log: &Path) -> PathBuf {
    let mut p = log.as_os_str().to_owned();
    p.push(".meta.json");
    p.into()
}

struct Data {
    records: Vec<ImpressionRecord>,
    meta: LogMeta,
}

fn load_file(source: &DataConfig, d_max: i64) -> Result<Option<Data>, CliError> {
    let path = match (&source.kind, &source.path) {
        (DataKind::Synthetic, _) => return Ok(None),
        (_, Some(p)) => p,
        (_, None) => return Err(CliError::Config("data.path: required for log data".into())),
    };
    let (mut records, meta) = match source.kind {
        DataKind::Synthetic => unreachable!(),
        DataKind::Criteo => {
            let parser = CriteoParser::new(source.n_buckets)
                .map_err(|e| CliError::Config(format!("data.n_buckets: {e}")))?
                .with_d_max(d_max);
            let meta = LogMeta {
                dim: parser.hasher.dim(),
                n_fields: parser.hasher.n_fields() as usize,
            };
            (ingest::read_criteo(path, &parser)?, Some(meta))
        }
        DataKind::Canonical => {
            let records = ingest::read_canonical(path, d_max)?;
            let sidecar = match fs::read_to_string(meta_path(path)) {
                Ok(text) => Some(
                    serde_json::from_str::<LogMeta>(&text)
                        .map_err(|e| CliError::Config(format!("{}: {e}", meta_path(path).display())))?,
                ),
                Err(_) => None,
            };
            let inferred = LogMeta {
                dim: records.iter().flat_map(|r| &r.features).map(|f| f.index + 1).max().unwrap_or(1),
                n_fields: records.first().map_or(1, |r| r.features.len()),
            };
            let base = sidecar.unwrap_or(inferred);
            let meta = LogMeta {
                dim: source.dim.unwrap_or(base.dim),
                n_fields: source.n_fields.unwrap_or(base.n_fields),
            };
            (records, Some(meta))
        }
    };
    let meta = meta.unwrap();
    if records.is_empty() {
        return Err(CliError::Config("data.path: log contains no records".into()));
    }
    for r in &records {
        r.validate(meta.dim, d_max)?;
        if r.features.len() != meta.n_fields {
            return Err(CliError::Config(format!(
                "data.n_fields: record {} has {} features, expected {}",
                r.id,
                r.features.len(),
                meta.n_fields
            )));
        }
    }
    if !ingest::is_sorted_by_log_time(&records) {
        ingest::sort_by_log_time(&mut records);
    }
    Ok(Some(Data { records, meta }))
}

fn synthetic(cfg: &RunConfig, seed: u64) -> Result<Data, CliError> {
    let generator = cfg.data.generator.as_ref().expect("validated synthetic source");
    let mut g = generator.clone();
    g.seed = seed;
    let n_fields = g.fields.len();
    let generator = Generator::new(g)?;
    Ok(Data {
        records: generator.generate(),
        meta: LogMeta {
            dim: generator.dim(),
            n_fields,
        },
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn run_seed(
    cfg: &RunConfig,
    specs: &[LearnerSpec],
    shared: Option<&Data>,
    seed: u64,
    plot: bool,
) -> Result<SimReport, CliError> {
    let owned;
    let data = match shared {
        Some(d) => d,
        None => {
            owned = synthetic(cfg, seed)?;
            &owned
        }
    };
    let ctx = LearnerContext {
        dim: data.meta.dim,
        n_fields: data.meta.n_fields,
        schedule: cfg.schedule.clone(),
        seed,
    };
    let mut learners: Vec<Box<dyn Learner>> = specs
        .iter()
        .map(|s| match cfg.precision {
            Precision::F32 => build_learner::<f32>(s, &ctx),
            Precision::F64 => build_learner::<f64>(s, &ctx),
        })
        .collect::<Result<_, _>>()?;
    let report = run_simulation(&data.records, &mut learners, &cfg.schedule, &cfg.sim)?;

    let dir = cfg.output.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    write(&dir.join("report.json"), &report.to_json())?;
    write(&dir.join("config.toml"), &cfg.snapshot(seed, specs))?;
    if plot {
        write(&dir.join("plot.csv"), &report.plot_data())?;
    }
    for l in &learners {
        if let Some(log) = l.extended_log() {
            let path = dir.join(format!("{}.extlog", l.name()));
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            write_extended_log(&mut w, log.entries())
                .and_then(|_| std::io::Write::flush(&mut w))
                .map_err(|e| CliError::io(&path, e))?;
        }
    }
    if cfg.checkpoints {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| CliError::io(&ck, e))?;
        for l in &learners {
            l.save(&ck)?;
        }
    }
    Ok(report)
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(o) = args.output {
        cfg.output = o;
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(path) = args.data {
        cfg.data = DataConfig::canonical(path);
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    if let Some(s) = args.step {
        cfg.sim.step = s;
    }
    if let Some(w) = args.warmup {
        cfg.sim.warmup = w;
    }
    if args.no_checkpoints {
        cfg.checkpoints = false;
    }
    let specs = cfg.validate()?;
    let shared = load_file(&cfg.data, cfg.d_max())?;
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::io(&cfg.output, e))?;
    write(
        &cfg.output.join("config.toml"),
        &toml::to_string(&cfg).expect("config serializes"),
    )?;

    let seeds = cfg.seeds.clone();
    let workers = worker_count(seeds.len());
    eprintln!("running {} seed(s) with {} learner(s) on {workers} worker(s)", seeds.len(), specs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SimReport, CliError>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = run_seed(&cfg, &specs, shared.as_ref(), seeds[i], args.plot_data);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut first_err = None;
    for (seed, r) in seeds.iter().zip(results.into_inner().unwrap()) {
        match r.expect("every seed ran") {
            Ok(report) => {
                println!("seed {seed}: eval [{}, {})", report.eval_start, report.eval_end);
                print!("{}", report.summary_table());
            }
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => {
            println!("wrote {}", cfg.output.display());
            Ok(())
        }
    }
}

pub fn gen(args: GenArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    cfg.validate()?;
    if cfg.data.kind != DataKind::Synthetic {
        return Err(CliError::Config("data.kind: gen needs a synthetic data source".into()));
    }
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let out = args
        .out
        .unwrap_or_else(|| cfg.output.join(format!("log-seed-{seed}.tsv")));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let data = synthetic(&cfg, seed)?;
    ingest::write_canonical(&out, &data.records)?;
    write(&meta_path(&out), &serde_json::to_string_pretty(&data.meta).expect("meta serializes"))?;
    println!("wrote {} records to {}", data.records.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct LogStats {
    records: usize,
    conversions: usize,
    conversion_rate: f64,
    mean_delay: Option<f64>,
    /// `(q, delay)` over converted records, linear interpolation between
    /// order statistics.
    delay_quantiles: Vec<(f64, f64)>,
    /// `(d_k, percent of conversions observed within d_k)`.
    feedback: Vec<(i64, f64)>,
}

const QUANTILES: [f64; 7] = [0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

fn quantile(sorted: &[i64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let (lo, frac) = (h.floor() as usize, h - h.floor());
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] as f64 + frac * (sorted[hi] - sorted[lo]) as f64
}

fn log_stats(records: &[ImpressionRecord], schedule: &TaskSchedule) -> LogStats {
    let mut delays: Vec<i64> = records.iter().filter_map(|r| r.delay()).collect();
    delays.sort_unstable();
    let n = records.len();
    LogStats {
        records: n,
        conversions: delays.len(),
        conversion_rate: delays.len() as f64 / n.max(1) as f64,
        mean_delay: (!delays.is_empty()).then(|| delays.iter().sum::<i64>() as f64 / delays.len() as f64),
        delay_quantiles: if delays.is_empty() {
            Vec::new()
        } else {
            QUANTILES.iter().map(|&q| (q, quantile(&delays, q))).collect()
        },
        feedback: schedule.delays().iter().copied().zip(feedback_rates(records, schedule)).collect(),
    }
}

pub fn stats(args: StatsArgs) -> Result<(), CliError> {
    let schedule = match args.schedule {
        Some(d) => TaskSchedule::new(d).map_err(|e| CliError::Config(format!("--schedule: {e}")))?,
        None => TaskSchedule::criteo(),
    };
    if !args.log.is_file() {
        return Err(CliError::Config(format!("no such file {}", args.log.display())));
    }
    let records = match args.format {
        LogFormat::Canonical => ingest::read_canonical(&args.log, schedule.d_max())?,
        LogFormat::Criteo => {
            let parser = CriteoParser::new(1 << 16)?.with_d_max(schedule.d_max());
            ingest::read_criteo(&args.log, &parser)?
        }
    };
    let s = log_stats(&records, &schedule);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
        return Ok(());
    }
    println!("records      {}", s.records);
    println!("conversions  {} ({:.3}%)", s.conversions, 100.0 * s.conversion_rate);
    if let Some(m) = s.mean_delay {
        println!("mean delay   {:.0}s ({:.2}d)", m, m / DAY as f64);
    }
    for (q, d) in &s.delay_quantiles {
        println!("delay p{:<3}  {:.0}s", (q * 100.0).round(), d);
    }
    println!("{:>10} {:>10}", "d_k", "Feedback%");
    for (d, pct) in &s.feedback {
        println!("{:>10} {:>10.1}", cvr_core::learners::format_duration(*d), pct);
    }
    Ok(())
}

fn report_dirs(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if run_dir.join("report.json").is_file() {
        return Ok(vec![run_dir.to_path_buf()]);
    }
    let entries = fs::read_dir(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    let mut dirs: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let seed = name.strip_prefix("seed-")?.parse().ok()?;
            e.path().join("report.json").is_file().then(|| (seed, e.path()))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Config(format!("{}: no report.json found", run_dir.display())));
    }
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

pub fn besttask(args: BesttaskArgs) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for dir in report_dirs(&args.run_dir)? {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let report: SimReport =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        reports.push((dir, report));
    }
    let mut pooled: Vec<(String, Vec<Vec<BestTaskRow>>)> = Vec::new();
    for (dir, report) in &reports {
        for (learner, rows) in &report.best_task {
            println!("{} ({learner})", dir.display());
            print!("{}", best_task_table(rows));
            match pooled.iter_mut().find(|(l, _)| l == learner) {
                Some((_, runs)) => runs.push(rows.clone()),
                None => pooled.push((learner.clone(), vec![rows.clone()])),
            }
        }
    }
    if pooled.is_empty() {
        return Err(CliError::Config(format!(
            "{}: run has no learner with an extended log",
            args.run_dir.display()
        )));
    }
    if reports.len() > 1 {
        for (learner, runs) in &pooled {
            let n = runs.len() as f64;
            let mean: Vec<BestTaskRow> = (0..runs[0].len())
                .map(|k| BestTaskRow {
                    delay: runs[0][k].delay,
                    feedback_pct: runs.iter().map(|r| r[k].feedback_pct).sum::<f64>() / n,
                    best_pct: runs.iter().map(|r| r[k].best_pct).sum::<f64>() / n,
                    best_count: runs.iter().map(|r| r[k].best_count).sum(),
                })
                .collect();
            println!("mean over {} runs ({learner})", runs.len());
            print!("{}", best_task_table(&mean));
        }
    }
    Ok(())
}
