use std::path::{Path, PathBuf};

use ampl::agent::Agent;
use ampl::config::{RunConfig, Variant};
use ampl::dataset::{collect_dataset, OfflineDataset};
use ampl::env::EvalSummary;
use ampl::miw::{write_weight_csv, MiwEstimator};
use ampl::train::{evaluate_agent, run_ampl_with, RunOutput, ScheduleCounts, METRICS_FILE};
use ampl::verify::{run_suite, CheckReport, VerifyOptions};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::manifest::{io_error, Manifest, MANIFEST_FILE};
use crate::{AblateArgs, EvalArgs, GenDatasetArgs, MiwDumpArgs, TrainArgs, VerifyArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const SUMMARY_FILE: &str = "summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| ampl::Error::from(e).into())
}

/// Parses `name=value,name=value` into tolerance overrides.
pub fn apply_overrides(opts: &mut VerifyOptions, spec: &str) -> Result<()> {
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("tolerance override {item:?} is not name=value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("tolerance override {item:?} has a non-numeric value")))?;
        opts.tolerances
            .set(name.trim(), value)
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

pub fn format_report(reports: &[CheckReport]) -> String {
    let mut out = format!(
        "{:<30} {:>9} {:>14} {:>10}  {}\n",
        "check", "instances", "max violation", "tolerance", "result"
    );
    for r in reports {
        out += &format!(
            "{:<30} {:>9} {:>14.3e} {:>10.1e}  {}\n",
            r.name,
            r.instances,
            r.max_violation,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    out
}

pub fn cmd_verify(args: &VerifyArgs, argv: &[String]) -> Result<Vec<CheckReport>> {
    if args.num_mdps == 0 {
        return Err(CliError::usage("--num-mdps must be positive"));
    }
    let mut opts = VerifyOptions {
        seed: args.seed,
        num_mdps: args.num_mdps,
        flip_prefactor: args.flip_prefactor,
        ..VerifyOptions::default()
    };
    if let Some(spec) = &args.tolerance_overrides {
        apply_overrides(&mut opts, spec)?;
    }
    let reports = run_suite(&opts);
    print!("{}", format_report(&reports));
    for failure in reports.iter().filter_map(|r| r.failure.as_ref()) {
        eprintln!("violating instance: {failure}");
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let path = dir.join(REPORT_FILE);
        let text = serde_json::to_string_pretty(&reports).map_err(ampl::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        let mut m = Manifest::new("verify", argv);
        m.seed = Some(args.seed);
        m.config = Some(to_value(&opts.tolerances)?);
        m.details = json!({ "num_mdps": args.num_mdps, "flip_prefactor": args.flip_prefactor });
        m.write(&dir.join(MANIFEST_FILE))?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: reports.len(),
        });
    }
    Ok(reports)
}

pub fn cmd_gen_dataset(args: &GenDatasetArgs, argv: &[String]) -> Result<OfflineDataset> {
    if args.episodes == 0 {
        return Err(CliError::usage("--episodes must be positive"));
    }
    let ds = collect_dataset(args.quality, args.episodes, args.seed)?;
    ds.save(&args.out)?;
    let mut m = Manifest::new("gen-dataset", argv);
    m.seed = Some(args.seed);
    m.details = json!({
        "quality": args.quality,
        "episodes": args.episodes,
        "transitions": ds.len(),
        "mean_episode_return": ds.meta.mean_episode_return(),
    });
    m.write(&args.out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} transitions ({} episodes, {}) to {}",
        ds.len(),
        args.episodes,
        args.quality,
        args.out.display()
    );
    Ok(ds)
}

/// Reads a config file, reporting every violation on its own line.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    check_config(&config)?;
    Ok(config)
}

fn check_config(config: &RunConfig) -> Result<()> {
    let v = config.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(CliError::usage(format!("invalid config:\n  {}", v.join("\n  "))))
    }
}

fn resolve_config(config: &Option<PathBuf>, desk_scale: bool) -> Result<RunConfig> {
    match config {
        Some(path) => load_config(path),
        None => Ok(RunConfig::preset(desk_scale)),
    }
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(OfflineDataset::load(path)?)
}

fn log_row(row: &ampl::train::EpochMetrics) {
    info!(
        "epoch {} seed {}: return {:.3} ± {:.3}",
        row.epoch, row.seed, row.mean_return, row.std_return
    );
}

fn save_run(out: &RunOutput, dir: &Path, argv: &[String], command: &'static str) -> Result<()> {
    out.save(dir)?;
    let config = &out.trainer.config;
    config.save(&dir.join(CONFIG_FILE))?;
    let mut m = Manifest::new(command, argv);
    m.seed = Some(config.seed);
    m.config = Some(to_value(config)?);
    m.details = json!({
        "variant": config.variant,
        "schedule": out.trainer.counts,
        "expected_schedule": ScheduleCounts::expected(config),
        "final_return": out.final_return(),
    });
    m.write(&dir.join(MANIFEST_FILE))
}

pub fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<RunOutput> {
    let mut config = resolve_config(&args.config, args.desk_scale)?;
    if let Some(v) = args.variant {
        config = config.with_variant(v);
    }
    check_config(&config)?;
    let ds = load_dataset(&args.dataset)?;
    info!("training {} (seed {}) on {} transitions", config.variant, config.seed, ds.len());
    let out = run_ampl_with(config, &ds, log_row)?;
    save_run(&out, &args.out, argv, "train")?;
    println!(
        "final return {:.3} (dataset mean {:.3}); metrics in {}",
        out.final_return(),
        ds.meta.mean_episode_return().unwrap_or(f64::NAN),
        args.out.join(METRICS_FILE).display()
    );
    Ok(out)
}

/// Accepts a run directory, its `checkpoint/` or the component directory itself.
fn component_dir(path: &Path, component: &str, marker: &str) -> Option<PathBuf> {
    [path.join(component), path.join("checkpoint").join(component), path.to_path_buf()]
        .into_iter()
        .find(|d| d.join(marker).is_file())
}

pub fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<EvalSummary> {
    if args.episodes == 0 {
        return Err(CliError::usage("--episodes must be positive"));
    }
    let dir = component_dir(&args.checkpoint, "agent", "agent.json")
        .ok_or_else(|| CliError::usage(format!("no agent checkpoint under {}", args.checkpoint.display())))?;
    let agent = Agent::load(&dir)?;
    let summary = evaluate_agent(&agent, args.episodes, args.seed)?;
    println!(
        "mean return {:.3} ± {:.3} over {} episodes",
        summary.mean_return, summary.std_return, args.episodes
    );
    if let Some(out) = &args.out {
        create_dir(out)?;
        let path = out.join(EVAL_FILE);
        let text = serde_json::to_string_pretty(&summary).map_err(ampl::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        let mut m = Manifest::new("eval", argv);
        m.seed = Some(args.seed);
        m.details = json!({ "episodes": args.episodes, "checkpoint": args.checkpoint });
        m.write(&out.join(MANIFEST_FILE))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub final_return: f64,
    pub dataset_mean_return: f64,
}

pub fn cmd_ablate(args: &AblateArgs, argv: &[String]) -> Result<Vec<AblationRow>> {
    let base = resolve_config(&args.config, args.desk_scale)?;
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let seeds = if args.seeds.is_empty() {
        base.seeds.clone()
    } else {
        args.seeds.clone()
    };
    if seeds.is_empty() {
        return Err(CliError::usage("no seeds to run"));
    }
    let ds = load_dataset(&args.dataset)?;
    let dataset_mean = ds.meta.mean_episode_return().unwrap_or(f64::NAN);
    let mut jobs = Vec::with_capacity(variants.len() * seeds.len());
    for &v in &variants {
        for &seed in &seeds {
            jobs.push(RunConfig {
                seed,
                ..base.clone().with_variant(v)
            });
        }
    }
    for c in &jobs {
        check_config(c)?;
    }
    let rows = jobs
        .into_par_iter()
        .map(|config| {
            let dir = args.out.join(config.variant.name()).join(format!("seed{}", config.seed));
            let out = run_ampl_with(config, &ds, log_row)?;
            save_run(&out, &dir, argv, "ablate")?;
            let t = &out.trainer.config;
            Ok(AblationRow {
                variant: t.variant,
                seed: t.seed,
                final_return: out.final_return(),
                dataset_mean_return: dataset_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let path = args.out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e.into()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| io_error(&path, e.into()))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    let mut m = Manifest::new("ablate", argv);
    m.config = Some(to_value(&base)?);
    m.details = json!({ "variants": variants, "seeds": seeds });
    m.write(&args.out.join(MANIFEST_FILE))?;

    println!("{:<12} {:>6} {:>14} {:>16}", "variant", "runs", "mean final", "beat dataset");
    for v in &variants {
        let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == *v).collect();
        let mean = mine.iter().map(|r| r.final_return).sum::<f64>() / mine.len() as f64;
        let beat = mine.iter().filter(|r| r.final_return > r.dataset_mean_return).count();
        println!("{:<12} {:>6} {:>14.3} {:>13}/{}", v.name(), mine.len(), mean, beat, mine.len());
    }
    println!("dataset mean episode return {dataset_mean:.3}");
    Ok(rows)
}

/// Returns the raw weights that were written.
pub fn cmd_miw_dump(args: &MiwDumpArgs, argv: &[String]) -> Result<Vec<f64>> {
    let dir = component_dir(&args.checkpoint, "miw", "miw.json").ok_or_else(|| {
        CliError::usage(format!("no importance-weight estimator under {}", args.checkpoint.display()))
    })?;
    let est = MiwEstimator::load(&dir)?;
    let ds = load_dataset(&args.dataset)?;
    let expected = est.spec.layer_dims()[0].0;
    let got = ds.state_dim + ds.action_dim;
    if expected != got {
        return Err(CliError::usage(format!(
            "estimator expects {expected} input columns but the dataset has {got} (state {} + action {})",
            ds.state_dim, ds.action_dim
        )));
    }
    let raw = est.raw_weights(&ds).to_vec();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_weight_csv(&args.out, &raw)?;
    let mut m = Manifest::new("miw-dump", argv);
    m.details = json!({ "rows": raw.len(), "checkpoint": args.checkpoint, "dataset": args.dataset });
    let mut name = args.out.as_os_str().to_owned();
    name.push(".manifest.json");
    m.write(Path::new(&name))?;
    println!("wrote {} weights to {}", raw.len(), args.out.display());
    Ok(raw)
}
