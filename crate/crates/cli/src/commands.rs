//! Subcommand implementations: pretrain, adapt, sweep, report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use unient_core::adapt::Method;
use unient_core::nn::{load_checkpoint, save_checkpoint};
use unient_core::rng::substream;

use crate::config::ExperimentConfig;
use crate::pipeline::{
    pretrain_for_seed, print_headline, results_row, run_method, write_lines, write_report_json,
    write_score_dump, RESULTS_HEADER,
};
use crate::CliError;

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!(
            "{what} `{}` does not exist",
            path.display()
        )));
    }
    Ok(())
}

/// Train the source model for one seed and write the checkpoint.
pub fn cmd_pretrain(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Result<(), CliError> {
    let run_seed = seed_override.unwrap_or(cfg.seeds[0]);
    let parent = cfg
        .checkpoint_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    require_dir(parent, "output directory")?;

    let trained = pretrain_for_seed(cfg, run_seed)?;
    save_checkpoint(
        &trained.model,
        substream(run_seed, "pretrain", &[]),
        &cfg.checkpoint_path,
    )
    .map_err(CliError::runtime)?;
    println!(
        "pretrained seed {run_seed}: {} epochs, source test accuracy {:.2}%, checkpoint {}",
        trained.epochs_run,
        100.0 * trained.source_test_acc,
        cfg.checkpoint_path.display()
    );
    Ok(())
}

/// Run the online protocol for every requested seed and write reports.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    method_override: Option<Method>,
    seed_override: Option<u64>,
    dump_scores: bool,
) -> Result<(), CliError> {
    if !cfg.checkpoint_path.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint `{}` does not exist; run `unient pretrain` first",
            cfg.checkpoint_path.display()
        )));
    }
    require_dir(&cfg.output_dir, "output directory")?;
    let (model, _) = load_checkpoint(&cfg.checkpoint_path).map_err(CliError::runtime)?;

    let method = method_override.unwrap_or(cfg.adapt.method);
    let digest = cfg.digest();
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };

    let mut rows = vec![RESULTS_HEADER.to_string()];
    for &seed in &seeds {
        let outcome = run_method(cfg, &model, seed, method, dump_scores)?;
        write_report_json(&cfg.output_dir, method, seed, &digest, &outcome.report)?;
        if dump_scores && method.uses_filter() {
            let path = cfg
                .output_dir
                .join(format!("scores_{}_{}.csv", method.name(), seed));
            write_score_dump(&path, &outcome)?;
        }
        rows.push(results_row(method, seed, &digest, &outcome.report));
        print_headline(method, seed, &outcome.report);
    }
    write_lines(&cfg.output_dir.join("results.csv"), &rows)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda1,
    Lambda2,
    Ratio,
    Openness,
    Rounds,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Lambda1,
        SweepAxis::Lambda2,
        SweepAxis::Ratio,
        SweepAxis::Openness,
        SweepAxis::Rounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda1 => "lambda1",
            SweepAxis::Lambda2 => "lambda2",
            SweepAxis::Ratio => "ratio",
            SweepAxis::Openness => "openness",
            SweepAxis::Rounds => "rounds",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                CliError::Usage(format!(
                    "unknown sweep axis `{s}`; valid axes: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Patch one sweep point into a copy of the config.
fn apply_axis(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<ExperimentConfig, CliError> {
    let mut out = cfg.clone();
    let as_count = |what: &str| -> Result<usize, CliError> {
        if value.fract() != 0.0 || value < 0.0 {
            Err(CliError::Usage(format!(
                "{what} sweep needs nonnegative integers, got {value}"
            )))
        } else {
            Ok(value as usize)
        }
    };
    match axis {
        SweepAxis::Lambda1 => out.adapt.lambda1 = value,
        SweepAxis::Lambda2 => out.adapt.lambda2 = value,
        SweepAxis::Ratio => {
            // Hold the csID count fixed and let the csOOD count follow the
            // ratio, mirroring how the per-batch composition is defined.
            let (n_csid, _) = cfg.benchmark.batch_split();
            out.benchmark.csood_ratio = value;
            out.benchmark.batch_size = n_csid + (value * n_csid as f64).round() as usize;
        }
        SweepAxis::Openness => out.benchmark.unknown_class_count_active = as_count("openness")?,
        SweepAxis::Rounds => out.benchmark.repeat_rounds = as_count("rounds")?,
    }
    out.validate()?;
    Ok(out)
}

/// One run per (value, seed); per-seed models are pretrained in memory.
/// The CSV gains a final delta row: max minus min of the per-value means.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    method_override: Option<Method>,
) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep values must be nonempty".into()));
    }
    require_dir(&cfg.output_dir, "output directory")?;
    let method = method_override.unwrap_or(cfg.adapt.method);
    let digest = cfg.digest();

    // Per-seed models are shared across sweep points (the source task does
    // not depend on any swept axis).
    let mut models = Vec::new();
    for &seed in &cfg.seeds {
        models.push((seed, pretrain_for_seed(cfg, seed)?.model));
    }

    let mut rows = vec![format!(
        "axis,axis_value,seed,method,acc,auroc,fpr_at_tpr95,oscr,config_digest"
    )];
    // metric means per value: acc, auroc, fpr, oscr
    let mut means: Vec<[f64; 4]> = Vec::new();
    for &value in values {
        let point_cfg = apply_axis(cfg, axis, value)?;
        let mut sums = [0.0f64; 4];
        for (seed, model) in &models {
            let outcome = run_method(&point_cfg, model, *seed, method, false)?;
            let o = &outcome.report.overall;
            let vals = [
                o.acc.unwrap_or(f64::NAN),
                o.auroc.unwrap_or(f64::NAN),
                o.fpr_at_tpr95.unwrap_or(f64::NAN),
                o.oscr.unwrap_or(f64::NAN),
            ];
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            rows.push(format!(
                "{},{},{},{},{},{},{},{},{}",
                axis.name(),
                value,
                seed,
                method.name(),
                vals[0],
                vals[1],
                vals[2],
                vals[3],
                digest
            ));
        }
        means.push(sums.map(|s| s / models.len() as f64));
    }

    let delta: Vec<f64> = (0..4)
        .map(|i| {
            let col: Vec<f64> = means.iter().map(|m| m[i]).collect();
            col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - col.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .collect();
    rows.push(format!(
        "{},delta,,{},{},{},{},{},{}",
        axis.name(),
        method.name(),
        delta[0],
        delta[1],
        delta[2],
        delta[3],
        digest
    ));

    let path = cfg
        .output_dir
        .join(format!("sweep_{}_{}.csv", axis.name(), method.name()));
    write_lines(&path, &rows)?;
    println!(
        "sweep {} over {:?} for {}: delta acc {:.2}, auroc {:.2}, fpr {:.2}, oscr {:.2} -> {}",
        axis.name(),
        values,
        method.name(),
        delta[0],
        delta[1],
        delta[2],
        delta[3],
        path.display()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ReportHead {
    method: String,
    seed: u64,
    config_digest: String,
    acc: Option<f64>,
    auroc: Option<f64>,
    fpr_at_tpr95: Option<f64>,
    oscr: Option<f64>,
}

/// Aggregate report_*.json files in the output directory, refusing to mix
/// configs.
pub fn cmd_report(cfg: &ExperimentConfig, dir_override: Option<&Path>) -> Result<(), CliError> {
    let dir = dir_override.unwrap_or(&cfg.output_dir);
    require_dir(dir, "report directory")?;
    let mut heads: Vec<ReportHead> = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(CliError::runtime)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    entries.sort();
    for path in &entries {
        let text = std::fs::read_to_string(path).map_err(CliError::runtime)?;
        let head: ReportHead = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("bad report {}: {e}", path.display())))?;
        heads.push(head);
    }
    if heads.is_empty() {
        return Err(CliError::Usage(format!(
            "no report_*.json files in `{}`",
            dir.display()
        )));
    }
    let digest0 = heads[0].config_digest.clone();
    for h in &heads {
        if h.config_digest != digest0 {
            return Err(CliError::Usage(format!(
                "refusing to aggregate: config digest {} (method {}, seed {}) differs from {}",
                h.config_digest, h.method, h.seed, digest0
            )));
        }
    }

    let mut groups: BTreeMap<String, Vec<&ReportHead>> = BTreeMap::new();
    for h in &heads {
        groups.entry(h.method.clone()).or_default().push(h);
    }
    println!("config digest {digest0}");
    println!(
        "{:<12} {:>5} {:>8} {:>8} {:>10} {:>8}",
        "method", "runs", "acc", "auroc", "fpr@tpr95", "oscr"
    );
    for (method, hs) in &groups {
        let mean = |f: &dyn Fn(&ReportHead) -> Option<f64>| -> String {
            let vals: Vec<f64> = hs.iter().filter_map(|h| f(h)).collect();
            if vals.is_empty() {
                "n/a".into()
            } else {
                format!("{:.2}", vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        println!(
            "{:<12} {:>5} {:>8} {:>8} {:>10} {:>8}",
            method,
            hs.len(),
            mean(&|h| h.acc),
            mean(&|h| h.auroc),
            mean(&|h| h.fpr_at_tpr95),
            mean(&|h| h.oscr)
        );
    }
    Ok(())
}
