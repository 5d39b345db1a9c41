//! Distribution-aware filter: per-batch csOOD scores from the frozen source
//! model (max cosine to class prototypes, min-max normalized), a
//! two-component Gaussian mixture fit by EM over the scores, posterior
//! csID probabilities, and the hard batch split at 0.5.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelState, StatsMode};
use crate::tensor::{dot, l2_norm, Tensor};

/// Fitted two-component mixture over scores. Components are relabeled after
/// fitting so the csID component has the larger mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmParams {
    pub mu_csid: f64,
    pub var_csid: f64,
    pub mu_csood: f64,
    pub var_csood: f64,
    pub w_csid: f64,
    pub w_csood: f64,
    pub iterations_run: usize,
    pub final_log_likelihood: f64,
    /// Per-iteration log-likelihood, for monotonicity checks.
    pub log_likelihood_trace: Vec<f64>,
    /// Component means too close to separate (or constant scores).
    pub degenerate: bool,
}

/// Filter result for one batch.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Min-max normalized csOOD scores in [0, 1]; higher = more csID-like.
    pub scores: Vec<f64>,
    /// Posterior probability that each sample is csID.
    pub posteriors: Vec<f64>,
    pub gmm: GmmParams,
    pub csid_idx: Vec<usize>,
    pub csood_idx: Vec<usize>,
    /// Whole batch treated as csID (constant scores or collapsed mixture).
    pub degenerate: bool,
}

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 200;
pub const EM_LL_TOL: f64 = 1e-8;
/// Mixtures with means closer than this are considered unimodal.
pub const DEGENERATE_MEAN_GAP: f64 = 1e-3;

/// Raw score: max cosine similarity between each feature row and any
/// prototype row, then min-max normalized over the batch. Constant raw
/// scores map to 0.5 everywhere with the degenerate flag set.
pub fn csood_score(features: &Tensor, prototypes: &Tensor) -> Result<(Vec<f64>, bool)> {
    let n = features.rows();
    let proto_norms: Vec<f64> = (0..prototypes.rows())
        .map(|c| l2_norm(prototypes.row(c)))
        .collect();
    for (c, &nv) in proto_norms.iter().enumerate() {
        if nv == 0.0 {
            return Err(Error::ZeroNormRow(c));
        }
    }
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let f = features.row(i);
        let fnorm = l2_norm(f);
        if fnorm == 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        let mut best = f64::NEG_INFINITY;
        for (c, &pn) in proto_norms.iter().enumerate() {
            let cosine = dot(f, prototypes.row(c)) / (fnorm * pn);
            if cosine > best {
                best = cosine;
            }
        }
        raw.push(best);
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok((vec![0.5; n], true));
    }
    let range = max - min;
    Ok((raw.into_iter().map(|v| (v - min) / range).collect(), false))
}

fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    let inv = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    inv * (-(x - mu) * (x - mu) / (2.0 * var)).exp()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.max(VARIANCE_FLOOR))
}

/// Fit a two-component 1-D GMM by EM from a median-split initialization:
/// the lower half of the sorted scores seeds the csOOD component, the upper
/// half the csID component. Stops when the log-likelihood improves by less
/// than `EM_LL_TOL` or after `EM_MAX_ITERS` iterations.
pub fn fit_gmm2(scores: &[f64]) -> Result<GmmParams> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::TooFewScores(n));
    }

    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let all_equal = sorted[0] == sorted[n - 1];

    let half = n / 2;
    let (mut mu_lo, mut var_lo) = mean_var(&sorted[..half]);
    let (mut mu_hi, mut var_hi) = mean_var(&sorted[half..]);
    let mut w_lo = half as f64 / n as f64;
    let mut w_hi = 1.0 - w_lo;

    let mut trace = Vec::new();
    let mut iterations = 0;

    if !all_equal {
        for iter in 0..EM_MAX_ITERS {
            // E-step.
            let mut resp_hi = vec![0.0; n];
            let mut ll = 0.0;
            for (i, &s) in scores.iter().enumerate() {
                let a_hi = w_hi * normal_pdf(s, mu_hi, var_hi);
                let a_lo = w_lo * normal_pdf(s, mu_lo, var_lo);
                let denom = a_hi + a_lo;
                resp_hi[i] = if denom > 0.0 { a_hi / denom } else { 0.5 };
                ll += denom.max(f64::MIN_POSITIVE).ln();
            }
            trace.push(ll);
            iterations = iter + 1;
            if iter > 0 && ll - trace[iter - 1] < EM_LL_TOL {
                break;
            }

            // M-step.
            let n_hi: f64 = resp_hi.iter().sum();
            let n_lo = n as f64 - n_hi;
            if n_hi > 0.0 {
                mu_hi = scores
                    .iter()
                    .zip(&resp_hi)
                    .map(|(&s, &r)| s * r)
                    .sum::<f64>()
                    / n_hi;
                var_hi = (scores
                    .iter()
                    .zip(&resp_hi)
                    .map(|(&s, &r)| r * (s - mu_hi) * (s - mu_hi))
                    .sum::<f64>()
                    / n_hi)
                    .max(VARIANCE_FLOOR);
            }
            if n_lo > 0.0 {
                mu_lo = scores
                    .iter()
                    .zip(&resp_hi)
                    .map(|(&s, &r)| s * (1.0 - r))
                    .sum::<f64>()
                    / n_lo;
                var_lo = (scores
                    .iter()
                    .zip(&resp_hi)
                    .map(|(&s, &r)| (1.0 - r) * (s - mu_lo) * (s - mu_lo))
                    .sum::<f64>()
                    / n_lo)
                    .max(VARIANCE_FLOOR);
            }
            w_hi = n_hi / n as f64;
            w_lo = 1.0 - w_hi;
        }
    }

    // csID is the component with the larger mean.
    let (mu_csid, var_csid, w_csid, mu_csood, var_csood, w_csood) = if mu_hi >= mu_lo {
        (mu_hi, var_hi, w_hi, mu_lo, var_lo, w_lo)
    } else {
        (mu_lo, var_lo, w_lo, mu_hi, var_hi, w_hi)
    };
    let degenerate = all_equal || (mu_csid - mu_csood) < DEGENERATE_MEAN_GAP;

    Ok(GmmParams {
        mu_csid,
        var_csid,
        mu_csood,
        var_csood,
        w_csid,
        w_csood,
        iterations_run: iterations,
        final_log_likelihood: trace.last().copied().unwrap_or(f64::NAN),
        log_likelihood_trace: trace,
        degenerate,
    })
}

/// Posterior csID probability per score. A degenerate mixture yields all
/// ones: with no csOOD evidence the whole batch is treated as csID.
pub fn posteriors(scores: &[f64], gmm: &GmmParams) -> Vec<f64> {
    if gmm.degenerate {
        return vec![1.0; scores.len()];
    }
    scores
        .iter()
        .map(|&s| {
            let a_id = gmm.w_csid * normal_pdf(s, gmm.mu_csid, gmm.var_csid);
            let a_ood = gmm.w_csood * normal_pdf(s, gmm.mu_csood, gmm.var_csood);
            let denom = a_id + a_ood;
            if denom > 0.0 {
                (a_id / denom).clamp(0.0, 1.0)
            } else if s >= (gmm.mu_csid + gmm.mu_csood) / 2.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Hard partition at posterior 0.5. Either side may be empty.
pub fn split(posteriors: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut csid = Vec::new();
    let mut csood = Vec::new();
    for (i, &p) in posteriors.iter().enumerate() {
        if p >= 0.5 {
            csid.push(i);
        } else {
            csood.push(i);
        }
    }
    (csid, csood)
}

/// Full filter pass for one batch: features from the frozen source model
/// (running statistics), scores, EM fit (optionally warm-started from the
/// previous batch's fit), posteriors, and the split.
pub fn run_filter(
    frozen_source: &ModelState,
    prototypes: &Tensor,
    x: &Tensor,
    warm_start: Option<&GmmParams>,
) -> Result<FilterOutput> {
    let fwd = frozen_source.forward(x, StatsMode::Batch)?;
    let (scores, minmax_degenerate) = csood_score(&fwd.features, prototypes)?;

    let gmm = if minmax_degenerate {
        GmmParams {
            mu_csid: 0.5,
            var_csid: VARIANCE_FLOOR,
            mu_csood: 0.5,
            var_csood: VARIANCE_FLOOR,
            w_csid: 0.5,
            w_csood: 0.5,
            iterations_run: 0,
            final_log_likelihood: f64::NAN,
            log_likelihood_trace: Vec::new(),
            degenerate: true,
        }
    } else {
        match warm_start {
            Some(prev) if !prev.degenerate => refit_from(scores.as_slice(), prev)?,
            _ => fit_gmm2(&scores)?,
        }
    };

    let post = posteriors(&scores, &gmm);
    let (csid_idx, csood_idx) = split(&post);
    let degenerate = gmm.degenerate;
    Ok(FilterOutput {
        scores,
        posteriors: post,
        gmm,
        csid_idx,
        csood_idx,
        degenerate,
    })
}

/// EM with initialization taken from a previous fit instead of the median
/// split.
fn refit_from(scores: &[f64], init: &GmmParams) -> Result<GmmParams> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::TooFewScores(n));
    }
    let mut mu_hi = init.mu_csid;
    let mut var_hi = init.var_csid.max(VARIANCE_FLOOR);
    let mut w_hi = init.w_csid.clamp(0.05, 0.95);
    let mut mu_lo = init.mu_csood;
    let mut var_lo = init.var_csood.max(VARIANCE_FLOOR);
    let mut w_lo = 1.0 - w_hi;

    let mut trace = Vec::new();
    let mut iterations = 0;
    for iter in 0..EM_MAX_ITERS {
        let mut resp_hi = vec![0.0; n];
        let mut ll = 0.0;
        for (i, &s) in scores.iter().enumerate() {
            let a_hi = w_hi * normal_pdf(s, mu_hi, var_hi);
            let a_lo = w_lo * normal_pdf(s, mu_lo, var_lo);
            let denom = a_hi + a_lo;
            resp_hi[i] = if denom > 0.0 { a_hi / denom } else { 0.5 };
            ll += denom.max(f64::MIN_POSITIVE).ln();
        }
        trace.push(ll);
        iterations = iter + 1;
        if iter > 0 && ll - trace[iter - 1] < EM_LL_TOL {
            break;
        }
        let n_hi: f64 = resp_hi.iter().sum();
        let n_lo = n as f64 - n_hi;
        if n_hi > 0.0 {
            mu_hi = scores
                .iter()
                .zip(&resp_hi)
                .map(|(&s, &r)| s * r)
                .sum::<f64>()
                / n_hi;
            var_hi = (scores
                .iter()
                .zip(&resp_hi)
                .map(|(&s, &r)| r * (s - mu_hi) * (s - mu_hi))
                .sum::<f64>()
                / n_hi)
                .max(VARIANCE_FLOOR);
        }
        if n_lo > 0.0 {
            mu_lo = scores
                .iter()
                .zip(&resp_hi)
                .map(|(&s, &r)| s * (1.0 - r))
                .sum::<f64>()
                / n_lo;
            var_lo = (scores
                .iter()
                .zip(&resp_hi)
                .map(|(&s, &r)| (1.0 - r) * (s - mu_lo) * (s - mu_lo))
                .sum::<f64>()
                / n_lo)
                .max(VARIANCE_FLOOR);
        }
        w_hi = n_hi / n as f64;
        w_lo = 1.0 - w_hi;
    }

    let (mu_csid, var_csid, w_csid, mu_csood, var_csood, w_csood) = if mu_hi >= mu_lo {
        (mu_hi, var_hi, w_hi, mu_lo, var_lo, w_lo)
    } else {
        (mu_lo, var_lo, w_lo, mu_hi, var_hi, w_hi)
    };
    let degenerate = (mu_csid - mu_csood) < DEGENERATE_MEAN_GAP;
    Ok(GmmParams {
        mu_csid,
        var_csid,
        mu_csood,
        var_csood,
        w_csid,
        w_csood,
        iterations_run: iterations,
        final_log_likelihood: trace.last().copied().unwrap_or(f64::NAN),
        log_likelihood_trace: trace,
        degenerate,
    })
}
