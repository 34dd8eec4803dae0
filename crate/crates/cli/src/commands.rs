//! Command implementations behind the CLI verbs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use icaf_core::checkpoint;
use icaf_core::data::{load_dataset, synth_generate, Dataset, Split, SynthConfig};
use icaf_core::eval::evaluate_detector;
use icaf_core::gradcheck::GradCheckOptions;
use icaf_core::metrics::{save_froc_curve, save_predictions, MetricReport};
use icaf_core::train::{train, write_trace};
use icaf_core::{CoreError, ParamStore, Scalar};

use crate::blocks::{run_block, BLOCK_NAMES};
use crate::config::{parse_rows, AblateRow, Config};

/// Command failure split by exit-code class: `Check` is a completed run whose
/// verification failed (exit 1); `Core` inherits the cause, with missing
/// inputs mapping to exit 2.
#[derive(Debug)]
pub enum CliError {
    Core(CoreError),
    Check(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::from(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Core(CoreError::MissingInput(_)) => 2,
            CliError::Core(CoreError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CmdResult = Result<(), CliError>;

fn dataset_dir(cfg: &Config) -> PathBuf {
    cfg.opt_path("data.dir")
        .unwrap_or_else(|| cfg.out_dir().join("dataset"))
}

fn split_or(cfg: &Config, default: Split) -> Result<Split, CliError> {
    match cfg.str("data.split") {
        "" => Ok(default),
        s => Ok(Split::parse(s)?),
    }
}

pub fn cmd_synth(cfg: &Config) -> CmdResult {
    let dir = dataset_dir(cfg);
    let synth = cfg.synth_config()?;
    let manifest = synth_generate(&synth, &dir)?;
    let hard = manifest.entries.iter().filter(|e| e.hard).count();
    println!(
        "dataset dir={} images={} hard={} hash={}",
        dir.display(),
        manifest.entries.len(),
        hard,
        manifest.content_hash
    );
    Ok(())
}

pub fn cmd_gradcheck(cfg: &Config, inject_fault: bool) -> CmdResult {
    let probes = cfg.usize("gradcheck.probes")?;
    let seed = cfg.u64("seed")?;
    let mut failed = Vec::new();
    for (i, name) in BLOCK_NAMES.iter().enumerate() {
        let opts = GradCheckOptions {
            probes_per_param: probes,
            seed,
            inject_fault: inject_fault && i == 0,
            ..Default::default()
        };
        let report = run_block(name, &opts)?;
        let status = if report.passed() { "pass" } else { "fail" };
        println!(
            "block={name} probes={} max_rel_err={:.3e} status={status}",
            report.probes.len(),
            report.max_rel_err()
        );
        if !report.passed() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed for block(s): {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_train<T: Scalar>(cfg: &Config) -> CmdResult {
    let dir = cfg.opt_path("data.dir").ok_or_else(|| {
        CoreError::MissingInput("data.dir (generate a dataset with `icaf synth`)".into())
    })?;
    let split = split_or(cfg, Split::Train)?;
    let data = load_dataset(&dir, Some(split))?;
    let seed = cfg.u64("seed")?;
    let det = cfg.detector_config(cfg.variant()?, cfg.bool("use_c2")?, data.size)?;
    let tcfg = cfg.train_config(seed)?;

    let mut store = ParamStore::<T>::new(seed);
    let started = Instant::now();
    let result = train(&mut store, &det, &data, &tcfg)?;
    let out = cfg.out_dir();
    write_trace(&out.join("loss_trace.csv"), &result.trace)?;
    checkpoint::save(&store, &out.join("checkpoint.bin"))?;
    println!(
        "trained steps={} params={} final_loss={:.6} seconds={:.1}",
        result.trace.len(),
        store.scalar_count(),
        result.final_loss,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn cmd_eval<T: Scalar>(cfg: &Config) -> CmdResult {
    let dir = cfg.opt_path("data.dir").ok_or_else(|| {
        CoreError::MissingInput("data.dir (generate a dataset with `icaf synth`)".into())
    })?;
    let out = cfg.out_dir();
    let ckpt = cfg
        .opt_path("eval.checkpoint")
        .unwrap_or_else(|| out.join("checkpoint.bin"));
    let mut store = checkpoint::load::<T>(&ckpt)?;
    let split = split_or(cfg, Split::Val)?;
    let data = load_dataset(&dir, Some(split))?;
    let det = cfg.detector_config(cfg.variant()?, cfg.bool("use_c2")?, data.size)?;

    let result = evaluate_detector(&mut store, &det, &data)?;
    save_predictions(&out.join("predictions.txt"), &result.predictions)?;
    save_froc_curve(&out.join("froc_curve.csv"), &result.report.froc_curve)?;
    let rendered = result.report.render(&result.alphas);
    std::fs::write(out.join("report.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}

// ── ablation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct RunMetrics {
    ap: Option<f64>,
    ap50: Option<f64>,
    ap_small: Option<f64>,
    ap_medium: Option<f64>,
    ap_large: Option<f64>,
    mfroc: Option<f64>,
}

impl RunMetrics {
    fn from_report(r: &MetricReport) -> Self {
        RunMetrics {
            ap: r.ap,
            ap50: r.ap50,
            ap_small: r.ap_small,
            ap_medium: r.ap_medium,
            ap_large: r.ap_large,
            mfroc: r.mfroc,
        }
    }
}

/// Median over the defined values; `None` when every value is missing.
fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut xs: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "na".to_string(),
    }
}

fn ablate_dataset(cfg: &Config, out: &Path) -> Result<PathBuf, CliError> {
    if let Some(dir) = cfg.opt_path("data.dir") {
        if !dir.join(icaf_core::data::MANIFEST_NAME).is_file() {
            return Err(CoreError::MissingInput(format!(
                "dataset manifest under {}",
                dir.display()
            ))
            .into());
        }
        return Ok(dir);
    }
    let train_count = cfg.usize("ablate.train_count")?;
    let val_count = cfg.usize("ablate.val_count")?;
    let total = train_count + val_count;
    if total == 0 {
        return Err(CoreError::InvalidArgument("ablate needs a nonempty dataset".into()).into());
    }
    let synth = SynthConfig {
        count: total,
        train_frac: train_count as f64 / total as f64,
        val_frac: val_count as f64 / total as f64,
        ..cfg.synth_config()?
    };
    let dir = out.join("dataset");
    let manifest = synth_generate(&synth, &dir)?;
    println!(
        "dataset dir={} images={} hash={}",
        dir.display(),
        manifest.entries.len(),
        manifest.content_hash
    );
    Ok(dir)
}

fn run_one<T: Scalar>(
    cfg: &Config,
    row: &AblateRow,
    seed: u64,
    train_data: &Dataset,
    val_data: &Dataset,
    run_dir: &Path,
) -> Result<RunMetrics, CliError> {
    std::fs::create_dir_all(run_dir)?;
    let det = cfg.detector_config(row.variant, row.use_c2, train_data.size)?;
    let tcfg = cfg.train_config(seed)?;
    let mut store = ParamStore::<T>::new(seed);
    let trained = train(&mut store, &det, train_data, &tcfg)?;
    write_trace(&run_dir.join("loss_trace.csv"), &trained.trace)?;
    checkpoint::save(&store, &run_dir.join("checkpoint.bin"))?;

    let result = evaluate_detector(&mut store, &det, val_data)?;
    save_predictions(&run_dir.join("predictions.txt"), &result.predictions)?;
    save_froc_curve(&run_dir.join("froc_curve.csv"), &result.report.froc_curve)?;
    std::fs::write(
        run_dir.join("report.txt"),
        result.report.render(&result.alphas),
    )?;
    Ok(RunMetrics::from_report(&result.report))
}

pub fn cmd_ablate<T: Scalar>(cfg: &Config) -> CmdResult {
    let rows = parse_rows(cfg.str("ablate.rows"))?;
    if rows.is_empty() {
        return Err(CoreError::InvalidArgument("ablate.rows is empty".into()).into());
    }
    let seeds = cfg.list_u64("ablate.seeds")?;
    if seeds.is_empty() {
        return Err(CoreError::InvalidArgument("ablate.seeds is empty".into()).into());
    }
    let out = cfg.out_dir().join("ablate");
    std::fs::create_dir_all(&out)?;
    let data_dir = ablate_dataset(cfg, &out)?;
    let train_data = load_dataset(&data_dir, Some(Split::Train))?;
    let val_data = load_dataset(&data_dir, Some(Split::Val))?;

    let mut jobs = cfg.usize("ablate.jobs")?;
    if jobs == 0 {
        jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    }

    struct Job<'a> {
        row_idx: usize,
        row: &'a AblateRow,
        seed: u64,
    }
    let queue: Vec<Job> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| seeds.iter().map(move |&s| Job { row_idx: i, row, seed: s }))
        .collect();

    let started = Instant::now();
    let mut outcomes: Vec<Vec<(u64, Result<RunMetrics, CliError>)>> =
        rows.iter().map(|_| Vec::new()).collect();
    for wave in queue.chunks(jobs.max(1)) {
        let results: Vec<(usize, u64, Result<RunMetrics, CliError>)> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|job| {
                        let run_dir = out.join("runs").join(format!("{}_s{}", job.row.label, job.seed));
                        let (train_ref, val_ref) = (&train_data, &val_data);
                        scope.spawn(move || {
                            let m = run_one::<T>(cfg, job.row, job.seed, train_ref, val_ref, &run_dir);
                            (job.row_idx, job.seed, m)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
        for (row_idx, seed, m) in results {
            match &m {
                Ok(r) => println!(
                    "run variant={} seed={} ap50={} mfroc={}",
                    rows[row_idx].label,
                    seed,
                    fmt_opt(r.ap50),
                    fmt_opt(r.mfroc)
                ),
                Err(e) => println!("run variant={} seed={} failed: {e}", rows[row_idx].label, seed),
            }
            outcomes[row_idx].push((seed, m));
        }
    }

    let mut runs_csv = String::from("variant,seed,ap,ap50,ap_small,ap_medium,ap_large,mfroc,status\n");
    let mut summary_csv = String::from("variant,ap,ap50,ap_small,ap_medium,ap_large,mfroc\n");
    let mut table = String::from("variant            ap      ap50    ap_s    ap_m    ap_l    mfroc\n");
    let mut any_failed = false;
    for (row, runs) in rows.iter().zip(&outcomes) {
        let mut per: Vec<RunMetrics> = Vec::new();
        let mut row_failed = false;
        for (seed, m) in runs {
            match m {
                Ok(r) => {
                    runs_csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{},ok\n",
                        row.label,
                        seed,
                        fmt_opt(r.ap),
                        fmt_opt(r.ap50),
                        fmt_opt(r.ap_small),
                        fmt_opt(r.ap_medium),
                        fmt_opt(r.ap_large),
                        fmt_opt(r.mfroc)
                    ));
                    per.push(*r);
                }
                Err(_) => {
                    runs_csv.push_str(&format!("{},{},na,na,na,na,na,na,failed\n", row.label, seed));
                    row_failed = true;
                }
            }
        }
        if row_failed {
            any_failed = true;
            summary_csv.push_str(&format!("{},failed,failed,failed,failed,failed,failed\n", row.label));
            table.push_str(&format!("{:<18} failed\n", row.label));
            continue;
        }
        let med = |f: fn(&RunMetrics) -> Option<f64>| {
            median(&per.iter().map(f).collect::<Vec<_>>())
        };
        let (ap, ap50) = (med(|r| r.ap), med(|r| r.ap50));
        let (aps, apm) = (med(|r| r.ap_small), med(|r| r.ap_medium));
        let (apl, mfroc) = (med(|r| r.ap_large), med(|r| r.mfroc));
        summary_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.label,
            fmt_opt(ap),
            fmt_opt(ap50),
            fmt_opt(aps),
            fmt_opt(apm),
            fmt_opt(apl),
            fmt_opt(mfroc)
        ));
        table.push_str(&format!(
            "{:<18} {:<7} {:<7} {:<7} {:<7} {:<7} {:<7}\n",
            row.label,
            fmt_opt(ap),
            fmt_opt(ap50),
            fmt_opt(aps),
            fmt_opt(apm),
            fmt_opt(apl),
            fmt_opt(mfroc)
        ));
    }
    std::fs::write(out.join("results.csv"), &runs_csv)?;
    std::fs::write(out.join("summary.csv"), &summary_csv)?;
    print!("{table}");
    println!("ablation runs={} seconds={:.1}", queue.len(), started.elapsed().as_secs_f64());
    if any_failed {
        Err(CliError::Check("one or more ablation rows failed".into()))
    } else {
        Ok(())
    }
}
