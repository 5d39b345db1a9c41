//! Shared run plumbing: per-seed sub-stream derivation, pretraining, stream
//! runs, and the report/CSV writers.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use unient_core::adapt::{run_stream, AdaptConfig, Method, RunOptions, RunOutcome};
use unient_core::bench::{make_source, stream_with_draws, BenchmarkConfig};
use unient_core::metrics::EvalReport;
use unient_core::nn::{accuracy, pretrain, ModelState, StatsMode};
use unient_core::rng::substream;

use crate::config::ExperimentConfig;
use crate::CliError;

/// The benchmark world (clusters, corruption transforms, source data) is
/// fixed by `benchmark.seed`; each run seed only draws an independent test
/// stream from it. A checkpoint therefore stays valid across run seeds.
pub fn bench_world(cfg: &ExperimentConfig) -> BenchmarkConfig {
    cfg.benchmark.clone()
}

/// Draw-stream seed for one run.
pub fn stream_draw_seed(run_seed: u64) -> u64 {
    substream(run_seed, "stream", &[])
}

pub struct TrainedModel {
    pub model: ModelState,
    pub source_test_acc: f64,
    pub epochs_run: usize,
}

/// Pretrain a fresh model for one run seed. The source task (clusters and
/// drawn source data) belongs to the benchmark world; the run seed varies
/// the model initialization and epoch shuffling.
pub fn pretrain_for_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<TrainedModel, CliError> {
    let bench = bench_world(cfg);
    let train = make_source(&bench, cfg.pretrain.train_per_class, "source-train")
        .map_err(CliError::runtime)?;
    let test = make_source(&bench, cfg.pretrain.test_per_class, "source-test")
        .map_err(CliError::runtime)?;
    let (model, stats) = pretrain(
        &train,
        bench.c_s,
        &cfg.pretrain,
        substream(run_seed, "pretrain", &[]),
    )
    .map_err(CliError::runtime)?;
    let source_test_acc =
        accuracy(&model, &test.x, &test.y, StatsMode::Running).map_err(CliError::runtime)?;
    Ok(TrainedModel {
        model,
        source_test_acc,
        epochs_run: stats.epochs_run,
    })
}

/// One online run of `method` over the seed's stream.
pub fn run_method(
    cfg: &ExperimentConfig,
    model: &ModelState,
    run_seed: u64,
    method: Method,
    collect_score_dump: bool,
) -> Result<RunOutcome, CliError> {
    let bench = bench_world(cfg);
    if model.input_dim() != bench.d || model.class_count() != bench.c_s {
        return Err(CliError::Usage(format!(
            "checkpoint architecture {:?} does not match benchmark dims [d={}, c_s={}]",
            model.dims, bench.d, bench.c_s
        )));
    }
    let adapt_cfg: AdaptConfig = cfg.adapt.with_method(method);
    let batches =
        stream_with_draws(&bench, stream_draw_seed(run_seed)).map_err(CliError::runtime)?;
    let opts = RunOptions {
        score_kind: cfg.score_kind,
        collect_score_dump,
        collect_predictions: false,
    };
    run_stream(model, batches, &adapt_cfg, &opts).map_err(CliError::runtime)
}

#[derive(Debug, Serialize)]
pub struct ReportFile<'a> {
    pub method: &'a str,
    pub seed: u64,
    pub config_digest: &'a str,
    #[serde(flatten)]
    pub report: &'a EvalReport,
}

pub fn write_report_json(
    dir: &Path,
    method: Method,
    seed: u64,
    digest: &str,
    report: &EvalReport,
) -> Result<std::path::PathBuf, CliError> {
    let path = dir.join(format!("report_{}_{}.json", method.name(), seed));
    let file = ReportFile {
        method: method.name(),
        seed,
        config_digest: digest,
        report,
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(CliError::runtime)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(CliError::runtime)?;
    Ok(path)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub const RESULTS_HEADER: &str = "method,seed,acc,auroc,fpr_at_tpr95,oscr,config_digest";

pub fn results_row(method: Method, seed: u64, digest: &str, report: &EvalReport) -> String {
    let o = &report.overall;
    format!(
        "{},{},{},{},{},{},{}",
        method.name(),
        seed,
        fmt_opt(o.acc),
        fmt_opt(o.auroc),
        fmt_opt(o.fpr_at_tpr95),
        fmt_opt(o.oscr),
        digest
    )
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(CliError::runtime)?;
    for line in lines {
        writeln!(f, "{line}").map_err(CliError::runtime)?;
    }
    Ok(())
}

/// Score/posterior dump rows for one run: `score,posterior,true_is_csood`.
pub fn write_score_dump(path: &Path, outcome: &RunOutcome) -> Result<(), CliError> {
    let mut lines = vec!["score,posterior,true_is_csood".to_string()];
    for row in &outcome.score_dump {
        lines.push(format!(
            "{},{},{}",
            row.score,
            row.posterior,
            u8::from(row.true_is_csood)
        ));
    }
    write_lines(path, &lines)
}

pub fn print_headline(method: Method, seed: u64, report: &EvalReport) {
    let o = &report.overall;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());
    println!(
        "{:<12} seed {:<6} acc {:>6}  auroc {:>6}  fpr@tpr95 {:>6}  oscr {:>6}",
        method.name(),
        seed,
        f(o.acc),
        f(o.auroc),
        f(o.fpr_at_tpr95),
        f(o.oscr)
    );
}
