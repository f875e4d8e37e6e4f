use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use dlsm::analysis::{
    buffer_update_rate, level_update_rate, simulate_compaction, total_compaction_write_rate, upper_levels_fraction,
    SimConfig, SimStrategy,
};
use dlsm::{BloomPolicy, Db, FloatModel, Options, Strategy};
use dlsm_bench::{load, run_benchmark, BenchError, Clock, RunOptions, SampleWriter, WorkloadKind, WorkloadSpec};

const MB: f64 = (1 << 20) as f64;

#[derive(Parser)]
#[command(name = "dlsmdb", version, about = "Operate and benchmark a dlsm database")]
#[command(args_override_self = true)]
struct Cli {
    /// Database directory.
    #[arg(long, global = true, env = "DLSM_DB")]
    db: Option<PathBuf>,

    /// File of key=value lines, one per flag, applied before the command line.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Layout {
    #[arg(long, default_value = "dlsm")]
    strategy: String,
    /// Size ratio between adjacent levels.
    #[arg(long, default_value_t = 4)]
    r: u32,
    /// Number of on-disk levels.
    #[arg(long, default_value_t = 3)]
    k: u32,
    /// Memtable capacity in MB.
    #[arg(long, default_value_t = 16.0)]
    s0_mb: f64,
    #[arg(long, default_value_t = 2.0)]
    table_mb: f64,
    #[arg(long, default_value_t = 64.0)]
    cache_mb: f64,
    #[arg(long, default_value_t = 15)]
    bloom_bits: u32,
}

impl Layout {
    fn options(&self) -> Result<Options, BenchError> {
        let opts = Options {
            strategy: self.strategy.parse::<Strategy>().map_err(usage)?,
            size_ratio: self.r,
            levels: self.k,
            level0_capacity: (self.s0_mb * MB) as u64,
            table_size: (self.table_mb * MB) as u64,
            cache_capacity: (self.cache_mb * MB) as u64,
            bloom: BloomPolicy::Flat(self.bloom_bits),
            ..Options::default()
        };
        opts.validate().map_err(usage)?;
        Ok(opts)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Virtual,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create an empty database.
    Init {
        #[command(flatten)]
        layout: Layout,
    },
    /// Insert records 0..N in key order.
    Load {
        #[arg(long, default_value_t = 1 << 20)]
        records: u64,
        #[arg(long, default_value_t = 1024)]
        kv_bytes: usize,
    },
    /// Write one key
    Put { key: String, value: String },
    /// Print the value of one key
    Get { key: String },
    /// Delete one key
    Delete { key: String },
    /// Print live entries in [from, to).
    Scan {
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Settle pending compactions, or drain levels 1..k-1 into level k.
    Compact {
        #[arg(long)]
        aggressive: bool,
    },
    /// Evaluate the write-rate model, optionally against the simulator.
    Model {
        #[arg(long, default_value_t = 4)]
        r: u32,
        #[arg(long, default_value_t = 3)]
        k: u32,
        /// Ingest rate.
        #[arg(long, default_value_t = 1.0)]
        w0: f64,
        /// Memtable capacity, in the same unit as w0 times time.
        #[arg(long, default_value_t = 1.0)]
        s0: f64,
        /// Also simulate this many units of time.
        #[arg(long)]
        simulate: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Load a fresh database and run a workload against it.
    Bench {
        #[arg(long, default_value = "latest-zipfian")]
        workload: String,
        #[command(flatten)]
        layout: Layout,
        /// Measured seconds, after the warm-up.
        #[arg(long, default_value_t = 60)]
        duration: u64,
        #[arg(long, default_value_t = 60)]
        warmup: u64,
        /// Metrics CSV, one row per second.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "wall")]
        clock: ClockArg,
        #[arg(long, default_value_t = 1 << 20)]
        records: u64,
        #[arg(long, default_value_t = 1024)]
        kv_bytes: usize,
        #[arg(long, default_value_t = 1000.0)]
        read_qps: f64,
        #[arg(long, default_value_t = 500.0)]
        write_qps: f64,
        #[arg(long, default_value_t = 0.99)]
        zipf_theta: f64,
        #[arg(long, default_value_t = 0.10)]
        hot_range_fraction: f64,
        #[arg(long, default_value_t = 10.0)]
        scan_mb: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        readers: usize,
    },
    /// Show the level layout.
    Inspect {
        /// Include compaction-buffer segments.
        #[arg(long)]
        buffer: bool,
    },
    /// Print engine counters.
    Stats,
}

fn main() -> ExitCode {
    let args = match with_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn usage(e: dlsm::Error) -> BenchError {
    BenchError::Usage(e.to_string())
}

fn fail(e: &BenchError) -> ExitCode {
    eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
    match e {
        BenchError::Usage(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

/// Splices `--key=value` for every config entry right after the
/// subcommand, so flags given on the command line win.
fn with_config(mut args: Vec<String>) -> Result<Vec<String>, BenchError> {
    let Some(path) = flag_value(&args, "--config") else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)?;
    let cmd = Cli::command();
    let Some((at, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s.clone())))
    else {
        return Ok(args);
    };
    let known = |name: &str| sub.get_arguments().chain(cmd.get_arguments()).any(|a| a.get_long() == Some(name));
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BenchError::Usage(format!("{}:{}: expected key=value", path, n + 1)))?;
        let name = k.trim().replace('_', "-");
        if name == "config" || !known(&name) {
            continue;
        }
        match v.trim() {
            "true" | "on" if is_switch(&sub, &name) => extra.push(format!("--{name}")),
            "false" | "off" if is_switch(&sub, &name) => {}
            v => extra.push(format!("--{name}={v}")),
        }
    }
    args.splice(at + 1..at + 1, extra);
    Ok(args)
}

fn is_switch(sub: &clap::Command, name: &str) -> bool {
    sub.get_arguments()
        .find(|a| a.get_long() == Some(name))
        .is_some_and(|a| matches!(a.get_action(), clap::ArgAction::SetTrue))
}

fn flag_value(args: &[String], flag: &str) -> Option<String> {
    let prefix = format!("{flag}=");
    args.iter().enumerate().find_map(|(i, a)| {
        if a == flag {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix(&prefix).map(str::to_string)
        }
    })
}

fn db_path(cli_db: &Option<PathBuf>) -> Result<&Path, BenchError> {
    cli_db
        .as_deref()
        .ok_or_else(|| BenchError::Usage("no database given; pass --db or set DLSM_DB".into()))
}

fn open_existing(dir: &Path) -> Result<Db, BenchError> {
    let opts = Options::load(dir)?.ok_or_else(|| {
        BenchError::Engine(dlsm::Error::InvalidArgument(format!("no database at {}", dir.display())))
    })?;
    Ok(Db::open(
        dir,
        Options {
            create_if_missing: false,
            ..opts
        },
    )?)
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let mut out = io::stdout().lock();
    match cli.cmd {
        Cmd::Init { layout } => {
            let dir = db_path(&cli.db)?;
            if Options::load(dir)?.is_some() {
                return Err(dlsm::Error::InvalidArgument(format!("{} already holds a database", dir.display())).into());
            }
            let opts = layout.options()?;
            Db::open(dir, opts.clone())?;
            writeln!(out, "initialized {} ({} r={} k={})", dir.display(), opts.strategy, opts.size_ratio, opts.levels)?;
        }
        Cmd::Load { records, kv_bytes } => {
            let db = open_existing(db_path(&cli.db)?)?;
            load(&db, records, kv_bytes)?;
            writeln!(out, "loaded {records} records")?;
        }
        Cmd::Put { key, value } => {
            open_existing(db_path(&cli.db)?)?.put(key.as_bytes(), value.as_bytes())?;
        }
        Cmd::Get { key } => match open_existing(db_path(&cli.db)?)?.get(key.as_bytes())? {
            Some(v) => {
                out.write_all(&v)?;
                writeln!(out)?;
            }
            None => {
                return Err(BenchError::NotFound(key));
            }
        },
        Cmd::Delete { key } => {
            open_existing(db_path(&cli.db)?)?.delete(key.as_bytes())?;
        }
        Cmd::Scan { from, to, limit } => {
            let db = open_existing(db_path(&cli.db)?)?;
            let it = db.scan(from.as_deref().map(str::as_bytes), to.as_deref().map(str::as_bytes))?;
            for r in it.take(limit.unwrap_or(usize::MAX)) {
                let (k, v) = r?;
                out.write_all(&k)?;
                out.write_all(b"\t")?;
                out.write_all(&v)?;
                writeln!(out)?;
            }
        }
        Cmd::Compact { aggressive } => {
            let db = open_existing(db_path(&cli.db)?)?;
            if aggressive {
                db.compact_aggressive()?;
            } else {
                db.compact()?;
            }
            let m = db.metrics();
            writeln!(
                out,
                "compacted: jobs={} bytes_written={}",
                m.compaction_jobs, m.compaction_bytes_written
            )?;
        }
        Cmd::Model {
            r,
            k,
            w0,
            s0,
            simulate,
            seed,
        } => model(&mut out, r, k, w0, s0, simulate, seed)?,
        Cmd::Bench {
            workload,
            layout,
            duration,
            warmup,
            out: csv_path,
            clock,
            records,
            kv_bytes,
            read_qps,
            write_qps,
            zipf_theta,
            hot_range_fraction,
            scan_mb,
            seed,
            readers,
        } => {
            let spec = WorkloadSpec {
                kind: workload.parse::<WorkloadKind>()?,
                read_qps,
                write_qps,
                kv_bytes,
                zipf_theta,
                hot_range_fraction,
                scan_bytes: (scan_mb * MB) as u64,
                duration_sec: duration,
                seed,
                records,
            };
            spec.validate()?;
            let scratch;
            let dir = match &cli.db {
                Some(d) => {
                    if Options::load(d)?.is_some() {
                        return Err(BenchError::Usage(format!(
                            "{} already holds a database; bench loads a fresh one",
                            d.display()
                        )));
                    }
                    d.clone()
                }
                None => {
                    scratch = std::env::temp_dir().join(format!("dlsmdb-bench-{}", std::process::id()));
                    scratch.clone()
                }
            };
            let db = Db::open(&dir, layout.options()?)?;
            load(&db, records, kv_bytes)?;
            let opts = RunOptions {
                clock: match clock {
                    ClockArg::Wall => Clock::Wall,
                    ClockArg::Virtual => Clock::Virtual,
                },
                warmup_sec: warmup,
                readers,
            };
            let mut writer = csv_path.as_ref().map(File::create).transpose()?.map(SampleWriter::new).transpose()?;
            let res = run_benchmark(&db, &spec, &opts, |s| match writer.as_mut() {
                Some(w) => w.write(s),
                None => Ok(()),
            });
            drop(db);
            if cli.db.is_none() {
                let _ = std::fs::remove_dir_all(&dir);
            }
            writeln!(out, "{} {}", spec.kind, res?.render())?;
        }
        Cmd::Inspect { buffer } => {
            let db = open_existing(db_path(&cli.db)?)?;
            let insp = db.inspect();
            write!(out, "{}", insp.render(buffer))?;
            if buffer {
                let segs: usize = insp.buffer.iter().map(|b| b.segments.len()).sum();
                if segs == 0 {
                    writeln!(out, "buffer empty")?;
                } else {
                    writeln!(out, "buffer {segs} segments {:.2} MB", db.version().buffer_bytes() as f64 / MB)?;
                }
            }
        }
        Cmd::Stats => {
            let db = open_existing(db_path(&cli.db)?)?;
            let st = db.stats();
            let m = &st.metrics;
            let rows: [(&str, String); 16] = [
                ("lsm_bytes", st.lsm_bytes.to_string()),
                ("buffer_bytes", st.buffer_bytes.to_string()),
                ("memtable_bytes", st.memtable_bytes.to_string()),
                ("last_seq", st.last_seq.to_string()),
                ("flushes", m.flushes.to_string()),
                ("flush_bytes", m.flush_bytes.to_string()),
                ("buffer_dump_bytes", m.buffer_dump_bytes.to_string()),
                ("relinked_bytes", m.relinked_bytes.to_string()),
                ("compaction_jobs", m.compaction_jobs.to_string()),
                ("compaction_bytes_read", m.compaction_bytes_read.to_string()),
                ("compaction_bytes_written", m.compaction_bytes_written.to_string()),
                ("cache_hits", st.cache.hits.to_string()),
                ("cache_misses", st.cache.misses.to_string()),
                ("cache_invalidations", st.cache.invalidations.to_string()),
                ("files_deleted", st.files_deleted.to_string()),
                ("write_stalls", m.write_stalls.to_string()),
            ];
            for (k, v) in rows {
                writeln!(out, "{k}={v}")?;
            }
        }
    }
    Ok(())
}

fn model(
    out: &mut impl Write,
    r: u32,
    k: u32,
    w0: f64,
    s0: f64,
    simulate: Option<f64>,
    seed: u64,
) -> Result<(), BenchError> {
    let p = FloatModel::new(w0, s0, r, k)?;
    writeln!(out, "r={r} k={k} w0={w0} s0={s0}")?;
    writeln!(out, "level  size  U_i  U^d_i")?;
    for i in 1..=k {
        writeln!(
            out,
            "{i}  {:.4}  {:.6}  {:.6}",
            p.level_size(i),
            level_update_rate(&p, i)?,
            buffer_update_rate(&p, i)?
        )?;
    }
    writeln!(out, "compaction_write_rate={:.4}", total_compaction_write_rate(&p))?;
    writeln!(out, "upper_levels_fraction={:.6}", upper_levels_fraction::<f64>(r, k)?)?;
    if let Some(duration) = simulate {
        let cfg = SimConfig {
            seed,
            ..SimConfig::default()
        };
        for strategy in [SimStrategy::PlainLsm, SimStrategy::TwoPhase] {
            let rep = simulate_compaction(&p, strategy, duration, &cfg)?;
            writeln!(out, "simulated {strategy:?} over {} flushes", rep.flushes)?;
            writeln!(out, "level  rewrite  fan_in  covering  buffer_update")?;
            for l in &rep.levels {
                let d = l.buffer_update_fraction.map_or("-".to_string(), |d| format!("{d:.6}"));
                writeln!(
                    out,
                    "{}  {:.6}  {:.3}  {:.3}  {d}",
                    l.level, l.rewrite_fraction, l.fan_in_avg, l.overlap_time_avg
                )?;
            }
            writeln!(out, "upper_fraction={:.6}", rep.upper_fraction)?;
        }
    }
    Ok(())
}
