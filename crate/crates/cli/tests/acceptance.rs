//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (run with `--nocapture` to see them). Criteria 4-7
//! share one set of golden runs over seeds 42-46 on the default benchmark.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use unient_cli::config::ExperimentConfig;
use unient_cli::pipeline::{bench_world, pretrain_for_seed, run_method, stream_draw_seed};
use unient_core::adapt::{adapt_step, bn_optimizer, run_stream, AdaptConfig, Method, RunOptions};
use unient_core::autodiff::{Graph, Var};
use unient_core::bench::stream_with_draws;
use unient_core::filter::{fit_gmm2, run_filter, FilterOutput, GmmParams};
use unient_core::metrics::{
    auroc, csid_accuracy, fpr_at_tpr, id_confidence, oscr, ScoreKind, ScoredSample, StreamEval,
    Truth,
};
use unient_core::nn::ModelState;
use unient_core::tensor::Tensor;

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

// ---------------------------------------------------------------------------
// Shared golden runs
// ---------------------------------------------------------------------------

struct SeedRun {
    model: ModelState,
    reports: BTreeMap<&'static str, unient_core::metrics::EvalReport>,
}

struct Golden {
    cfg: ExperimentConfig,
    runs: Vec<(u64, SeedRun)>,
    build_seconds: f64,
}

fn golden() -> &'static Golden {
    static CELL: OnceLock<Golden> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::default();
        let mut runs = Vec::new();
        for &seed in &SEEDS {
            let trained = pretrain_for_seed(&cfg, seed).expect("pretrain");
            let mut reports = BTreeMap::new();
            for method in [Method::BnAdapt, Method::Tent, Method::Unient] {
                let outcome =
                    run_method(&cfg, &trained.model, seed, method, false).expect("stream run");
                reports.insert(method.name(), outcome.report);
            }
            runs.push((
                seed,
                SeedRun {
                    model: trained.model,
                    reports,
                },
            ));
        }
        Golden {
            cfg,
            runs,
            build_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn mean_metric(
    g: &Golden,
    method: &str,
    pick: impl Fn(&unient_core::metrics::MetricBlock) -> f64,
) -> f64 {
    let vals: Vec<f64> = g
        .runs
        .iter()
        .map(|(_, r)| pick(&r.reports[method].overall))
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

// ---------------------------------------------------------------------------
// Criterion 1: autodiff vs central finite differences
// ---------------------------------------------------------------------------

type LossBuilder = dyn Fn(&mut Graph, Var) -> Var;

fn loss_value(build: &LossBuilder, shape: &[usize], x: &[f64]) -> f64 {
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap(), false);
    let loss = build(&mut g, leaf);
    g.value(loss).data()[0]
}

fn check_op(build: &LossBuilder, shape: &[usize], x: &[f64]) -> f64 {
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap(), true);
    let loss = build(&mut g, leaf);
    g.backward(loss).unwrap();
    let ad = g.grad(leaf).unwrap().data().to_vec();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let fd = (loss_value(build, shape, &xp) - loss_value(build, shape, &xm)) / (2.0 * h);
        let rel = (ad[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn criterion_1_autodiff_matches_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97 ^ case);
        let (m, n, k, c) = (4, 3, 5, 3);
        let x: Vec<f64> = (0..m * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rm: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rv: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();

        // One composite touching every op kind, and per-parameter checks on
        // the BN affine inputs.
        let (wc, w2c, gc, bc, bbc) = (
            w.clone(),
            w2.clone(),
            gamma.clone(),
            beta.clone(),
            bias.clone(),
        );
        let composite: Box<LossBuilder> = Box::new(move |g, leaf| {
            let wv = g.constant(Tensor::new(vec![n, k], wc.clone()).unwrap());
            let w2v = g.constant(Tensor::new(vec![k, c], w2c.clone()).unwrap());
            let gv = g.constant(Tensor::new(vec![k], gc.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![k], bc.clone()).unwrap());
            let biasv = g.constant(Tensor::new(vec![k], bbc.clone()).unwrap());
            let mm = g.matmul(leaf, wv).unwrap();
            let pre = g.add_bias(mm, biasv).unwrap();
            let bn = g.batchnorm_train(pre, gv, bv).unwrap();
            let act = g.relu(bn).unwrap();
            let act2 = g.add(act, act).unwrap();
            let logits = g.matmul(act2, w2v).unwrap();
            let probs = g.softmax_rows(logits).unwrap();
            let lp = g.log(probs).unwrap();
            let plp = g.elementwise_mul(probs, lp).unwrap();
            let fbar = g.mean_rows(probs).unwrap();
            let lf = g.log(fbar).unwrap();
            let qf = g.elementwise_mul(fbar, lf).unwrap();
            let ent = g.sum(plp).unwrap();
            let marg = g.sum(qf).unwrap();
            let e1 = g.mul_scalar(ent, -1.0 / m as f64).unwrap();
            let e2 = g.mul_scalar(marg, 0.2).unwrap();
            g.add(e1, e2).unwrap()
        });
        worst = worst.max(check_op(&composite, &[m, n], &x));

        let (xc, bc2) = (x.clone(), beta.clone());
        let bn_gamma: Box<LossBuilder> = Box::new(move |g, leaf| {
            let xv = g.constant(Tensor::new(vec![m, n], xc.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![n], bc2[..n].to_vec()).unwrap());
            let bn = g.batchnorm_train(xv, leaf, bv).unwrap();
            let s = g.sum(bn).unwrap();
            g.elementwise_mul(s, s).unwrap()
        });
        worst = worst.max(check_op(&bn_gamma, &[n], &gamma[..n]));

        let (gc2, rmc, rvc) = (gamma.clone(), rm.clone(), rv.clone());
        let bn_eval_x: Box<LossBuilder> = Box::new(move |g, leaf| {
            let gv = g.constant(Tensor::new(vec![n], gc2[..n].to_vec()).unwrap());
            let bv = g.constant(Tensor::new(vec![n], rmc[..n].to_vec()).unwrap());
            let bn = g
                .batchnorm_eval(leaf, gv, bv, &rmc[..n], &rvc[..n])
                .unwrap();
            let r = g.relu(bn).unwrap();
            g.sum(r).unwrap()
        });
        worst = worst.max(check_op(&bn_eval_x, &[m, n], &x));
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(elapsed < 10.0, "gradient checks took {elapsed:.1}s");
    println!(
        "[acceptance] criterion 1 PASS - autodiff vs finite differences: worst rel err {worst:.2e} (< 1e-4), {elapsed:.2}s (< 10s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: GMM-EM recovery
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gmm_em_recovery() {
    let mut worst_id = 0.0f64;
    let mut worst_ood = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6333 ^ seed);
        let mut scores = Vec::with_capacity(200);
        for i in 0..200 {
            let (mu, sd) = if i % 2 == 0 { (0.2, 0.05) } else { (0.8, 0.05) };
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            scores.push(mu + sd * z);
        }
        let gmm = fit_gmm2(&scores).unwrap();
        let err_ood = (gmm.mu_csood - 0.2).abs();
        let err_id = (gmm.mu_csid - 0.8).abs();
        assert!(err_ood < 0.02, "seed {seed}: mu_csood err {err_ood}");
        assert!(err_id < 0.02, "seed {seed}: mu_csid err {err_id}");
        for w in gmm.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "seed {seed}: LL decreased");
        }
        worst_id = worst_id.max(err_id);
        worst_ood = worst_ood.max(err_ood);
    }
    println!(
        "[acceptance] criterion 2 PASS - GMM recovery 5/5 seeds: worst |mu err| id {worst_id:.4}, ood {worst_ood:.4} (< 0.02); EM log-likelihood nondecreasing"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: metric oracles
// ---------------------------------------------------------------------------

fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() as f64 * ood.len() as f64)
}

fn fpr_oracle(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &tau in id.iter().chain(ood) {
        let tpr = id.iter().filter(|&&s| s >= tau).count() as f64 / id.len() as f64;
        if tpr >= target && best.is_none_or(|b| tau > b) {
            best = Some(tau);
        }
    }
    let tau = best.unwrap_or(f64::NEG_INFINITY);
    ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64
}

fn oscr_oracle(samples: &[ScoredSample]) -> f64 {
    let n_id = samples
        .iter()
        .filter(|s| matches!(s.truth, Truth::Csid { .. }))
        .count() as f64;
    let n_ood = samples.len() as f64 - n_id;
    let mut taus: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    taus.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &tau in &taus {
        let mut ccr = 0.0;
        let mut fpr = 0.0;
        for s in samples {
            if s.confidence >= tau {
                match s.truth {
                    Truth::Csid { class } if s.predicted == class => ccr += 1.0,
                    Truth::Csood => fpr += 1.0,
                    _ => {}
                }
            }
        }
        pts.push((fpr / n_ood, ccr / n_id));
    }
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[test]
fn criterion_3_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c41e5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n1 = rng.random_range(1..=50);
        let n2 = rng.random_range(1..=50);
        // Quantized scores generate plenty of ties.
        let id: Vec<f64> = (0..n1)
            .map(|_| rng.random_range(-8i32..8) as f64 / 2.0)
            .collect();
        let ood: Vec<f64> = (0..n2)
            .map(|_| rng.random_range(-8i32..8) as f64 / 2.0)
            .collect();

        let d1 = (auroc(&id, &ood).unwrap() - auroc_oracle(&id, &ood)).abs();
        let d2 = (fpr_at_tpr(&id, &ood, 0.95).unwrap() - fpr_oracle(&id, &ood, 0.95)).abs();
        let samples: Vec<ScoredSample> = id
            .iter()
            .enumerate()
            .map(|(i, &c)| ScoredSample {
                confidence: c,
                predicted: i % 3,
                truth: Truth::Csid {
                    class: rng.random_range(0..3),
                },
            })
            .chain(ood.iter().map(|&c| ScoredSample {
                confidence: c,
                predicted: 0,
                truth: Truth::Csood,
            }))
            .collect();
        let d3 = (oscr(&samples).unwrap() - oscr_oracle(&samples)).abs();
        for d in [d1, d2, d3] {
            assert!(d < 1e-12, "oracle mismatch {d}");
            worst = worst.max(d);
        }
    }
    let perfect = auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap();
    assert_eq!(
        perfect, 1.0,
        "perfectly separated auroc must be exactly 1.0"
    );
    println!(
        "[acceptance] criterion 3 PASS - auroc/fpr@tpr/oscr match brute-force oracles on 100 instances (worst diff {worst:.2e} < 1e-12); auroc(separated) == 1.0"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: filter quality on the seed-42 stream
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_filter_split_quality() {
    let g = golden();
    let report = &g.runs[0].1.reports["unient"];
    let (p, r) = report.mean_filter_precision_recall();
    let (p, r) = (p.unwrap(), r.unwrap());
    assert!(p > 0.9, "mean split precision {p}");
    assert!(r > 0.9, "mean split recall {r}");
    println!(
        "[acceptance] criterion 4 PASS - seed-42 stream mean split precision {p:.3}, recall {r:.3} (> 0.9)"
    );
}

// ---------------------------------------------------------------------------
// Criteria 5 and 6: directional reproduction over 5 seeds
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_unient_beats_tent_directionally() {
    let g = golden();
    let auroc_unient = mean_metric(g, "unient", |o| o.auroc.unwrap());
    let auroc_tent = mean_metric(g, "tent", |o| o.auroc.unwrap());
    let oscr_unient = mean_metric(g, "unient", |o| o.oscr.unwrap());
    let oscr_tent = mean_metric(g, "tent", |o| o.oscr.unwrap());
    let acc_unient = mean_metric(g, "unient", |o| o.acc.unwrap());
    let acc_bn = mean_metric(g, "bn_adapt", |o| o.acc.unwrap());

    assert!(
        auroc_unient >= auroc_tent + 5.0,
        "mean AUROC unient {auroc_unient:.2} vs tent {auroc_tent:.2}"
    );
    assert!(
        oscr_unient >= oscr_tent + 3.0,
        "mean OSCR unient {oscr_unient:.2} vs tent {oscr_tent:.2}"
    );
    assert!(
        acc_unient >= acc_bn - 1.0,
        "mean Acc unient {acc_unient:.2} vs bn_adapt {acc_bn:.2}"
    );
    assert!(
        g.build_seconds < 300.0,
        "golden runs took {:.0}s",
        g.build_seconds
    );
    println!(
        "[acceptance] criterion 5 PASS - 5-seed means: AUROC unient {auroc_unient:.2} >= tent {auroc_tent:.2} + 5; OSCR {oscr_unient:.2} >= {oscr_tent:.2} + 3; Acc {acc_unient:.2} >= bn_adapt {acc_bn:.2} - 1 ({:.0}s < 300s)",
        g.build_seconds
    );
}

#[test]
fn criterion_6_tent_degrades_detection_vs_bn_adapt() {
    let g = golden();
    let auroc_tent = mean_metric(g, "tent", |o| o.auroc.unwrap());
    let auroc_bn = mean_metric(g, "bn_adapt", |o| o.auroc.unwrap());
    assert!(
        auroc_tent < auroc_bn,
        "mean AUROC tent {auroc_tent:.2} vs bn_adapt {auroc_bn:.2}"
    );
    println!(
        "[acceptance] criterion 6 PASS - mean AUROC tent {auroc_tent:.2} < bn_adapt {auroc_bn:.2}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: ratio robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_ratio_robustness() {
    let g = golden();
    let ratios = [0.2, 0.4, 0.6, 0.8, 1.0];

    let spread = |method: Method| -> f64 {
        let mut means = Vec::new();
        for &ratio in &ratios {
            let mut cfg = g.cfg.clone();
            let (n_csid, _) = cfg.benchmark.batch_split();
            cfg.benchmark.csood_ratio = ratio;
            cfg.benchmark.batch_size = n_csid + (ratio * n_csid as f64).round() as usize;
            let mut sum = 0.0;
            for (seed, run) in &g.runs {
                let outcome = run_method(&cfg, &run.model, *seed, method, false).unwrap();
                sum += outcome.report.overall.oscr.unwrap();
            }
            means.push(sum / g.runs.len() as f64);
        }
        means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - means.iter().cloned().fold(f64::INFINITY, f64::min)
    };

    let spread_unient = spread(Method::Unient);
    let spread_tent = spread(Method::Tent);
    assert!(
        spread_unient < spread_tent,
        "OSCR spread unient {spread_unient:.2} vs tent {spread_tent:.2}"
    );
    println!(
        "[acceptance] criterion 7 PASS - OSCR spread over csood_ratio: unient {spread_unient:.2} < tent {spread_tent:.2}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: equivalence properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_equivalences() {
    let g = golden();
    let model0 = &g.runs[0].1.model;
    let bench = bench_world(&g.cfg);
    let batches: Vec<_> = stream_with_draws(&bench, stream_draw_seed(SEEDS[0]))
        .unwrap()
        .take(10)
        .collect();

    // (a) unient_plus with pi = 1 matches tent with marginal, 10 steps.
    let lambda = 0.2;
    let mut tent_model = model0.clone();
    let tent_cfg = AdaptConfig {
        lambda_tent: lambda,
        ..AdaptConfig::default().with_method(Method::Tent)
    };
    let mut tent_opt = bn_optimizer(&tent_model);
    let mut plus_model = model0.clone();
    let plus_cfg = AdaptConfig {
        lambda2: lambda,
        ..AdaptConfig::default().with_method(Method::UnientPlus)
    };
    let mut plus_opt = bn_optimizer(&plus_model);
    let mut worst_step_diff = 0.0f64;
    for batch in &batches {
        let n = batch.x.rows();
        let unit_filter = FilterOutput {
            scores: vec![0.5; n],
            posteriors: vec![1.0; n],
            gmm: GmmParams {
                mu_csid: 0.5,
                var_csid: 1e-6,
                mu_csood: 0.5,
                var_csood: 1e-6,
                w_csid: 0.5,
                w_csood: 0.5,
                iterations_run: 0,
                final_log_likelihood: 0.0,
                log_likelihood_trace: vec![],
                degenerate: true,
            },
            csid_idx: (0..n).collect(),
            csood_idx: vec![],
            degenerate: true,
        };
        let a = adapt_step(&mut tent_model, &batch.x, &tent_cfg, None, &mut tent_opt).unwrap();
        let b = adapt_step(
            &mut plus_model,
            &batch.x,
            &plus_cfg,
            Some(&unit_filter),
            &mut plus_opt,
        )
        .unwrap();
        worst_step_diff = worst_step_diff.max((a.loss.unwrap() - b.loss.unwrap()).abs());
        for (layer_a, layer_b) in tent_model.layers.iter().zip(&plus_model.layers) {
            for (x, y) in layer_a
                .gamma
                .data()
                .iter()
                .chain(layer_a.beta.data())
                .zip(layer_b.gamma.data().iter().chain(layer_b.beta.data()))
            {
                worst_step_diff = worst_step_diff.max((x - y).abs());
            }
        }
    }
    assert!(worst_step_diff < 1e-12, "step divergence {worst_step_diff}");

    // (b) filter scores invariant under adaptation: bit-identical after 50
    // steps.
    let protos = model0.prototypes();
    let before = run_filter(model0, &protos, &batches[0].x, None).unwrap();
    let mut adapted = model0.clone();
    let cfg50 = AdaptConfig::default().with_method(Method::Tent);
    let mut opt50 = bn_optimizer(&adapted);
    for _ in 0..50 {
        adapt_step(&mut adapted, &batches[0].x, &cfg50, None, &mut opt50).unwrap();
    }
    let after = run_filter(model0, &protos, &batches[0].x, None).unwrap();
    assert_eq!(
        before.scores, after.scores,
        "scores changed under adaptation"
    );
    assert_eq!(before.posteriors, after.posteriors);

    // (c) streaming metrics equal one-shot metrics bit-for-bit.
    let opts = RunOptions {
        collect_predictions: true,
        ..Default::default()
    };
    let outcome = run_stream(
        model0,
        batches.clone(),
        &AdaptConfig::default().with_method(Method::BnAdapt),
        &opts,
    )
    .unwrap();
    let mut one_shot = StreamEval::new(ScoreKind::Energy);
    for (batch, logits) in batches.iter().zip(&outcome.predictions) {
        one_shot.push_batch(logits, &batch.y, &batch.is_csood, batch.domain, None);
    }
    let direct = one_shot.finalize();
    assert_eq!(outcome.report.overall.acc, direct.overall.acc);
    assert_eq!(outcome.report.overall.auroc, direct.overall.auroc);
    assert_eq!(
        outcome.report.overall.fpr_at_tpr95,
        direct.overall.fpr_at_tpr95
    );
    assert_eq!(outcome.report.overall.oscr, direct.overall.oscr);

    // And the flat per-sample computation agrees bitwise too.
    let mut samples = Vec::new();
    let mut ids = Vec::new();
    let mut oods = Vec::new();
    for (batch, logits) in batches.iter().zip(&outcome.predictions) {
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let conf = id_confidence(row, ScoreKind::Energy);
            let pred = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            let truth = if batch.is_csood[i] {
                oods.push(conf);
                Truth::Csood
            } else {
                ids.push(conf);
                Truth::Csid { class: batch.y[i] }
            };
            samples.push(ScoredSample {
                confidence: conf,
                predicted: pred,
                truth,
            });
        }
    }
    assert_eq!(
        outcome.report.overall.acc.unwrap(),
        100.0 * csid_accuracy(&samples).unwrap()
    );
    assert_eq!(
        outcome.report.overall.auroc.unwrap(),
        100.0 * auroc(&ids, &oods).unwrap()
    );
    assert_eq!(
        outcome.report.overall.oscr.unwrap(),
        100.0 * oscr(&samples).unwrap()
    );

    println!(
        "[acceptance] criterion 8 PASS - unient_plus(pi=1) == tent(lambda=lambda2) over 10 steps (max diff {worst_step_diff:.2e} < 1e-12); filter scores bit-identical after 50 steps; streaming == one-shot bit-for-bit"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: CLI determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_cli_byte_identical_results() {
    let dir = std::env::temp_dir().join(format!("unient-acceptance-{}", std::process::id()));
    let out = dir.join("out");
    std::fs::create_dir_all(&out).unwrap();
    let config_path: PathBuf = dir.join("config.toml");
    // Moderate stream so the two runs stay quick.
    std::fs::write(
        &config_path,
        format!(
            r#"
checkpoint_path = "{out}/checkpoint.json"
output_dir = "{out}"
seeds = [7]

[benchmark]
batches_per_domain = 5
"#,
            out = out.display()
        ),
    )
    .unwrap();

    let run = |args: &[&str]| {
        let status = Command::new(env!("CARGO_BIN_EXE_unient"))
            .args(args)
            .arg("--config")
            .arg(&config_path)
            .status()
            .unwrap();
        assert!(status.success(), "command {args:?} failed");
    };
    run(&["pretrain"]);
    run(&["adapt", "--method", "unient", "--seed", "7"]);
    let first = std::fs::read(out.join("results.csv")).unwrap();
    run(&["adapt", "--method", "unient", "--seed", "7"]);
    let second = std::fs::read(out.join("results.csv")).unwrap();
    assert_eq!(first, second, "results.csv differs between identical runs");
    println!(
        "[acceptance] criterion 9 PASS - two runs of `unient adapt --method unient --seed 7` wrote byte-identical results.csv ({} bytes)",
        first.len()
    );
}
