//! Online test-time adaptation: Source / BN-Adapt / TENT baselines and the
//! UniEnt / UniEnt+ objectives. Gradient methods update only the batch-norm
//! affine parameters, via Adam, from the same forward pass that produces
//! the predictions recorded for evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bench::LabeledBatch;
use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterOutput, GmmParams};
use crate::metrics::{EvalReport, ScoreKind, StreamEval};
use crate::nn::{grad_in_model_layout, ModelState, ParamId, ParamScope, StatsMode};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    BnAdapt,
    Tent,
    Unient,
    UnientPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Source,
        Method::BnAdapt,
        Method::Tent,
        Method::Unient,
        Method::UnientPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnAdapt => "bn_adapt",
            Method::Tent => "tent",
            Method::Unient => "unient",
            Method::UnientPlus => "unient_plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidConfig(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn uses_filter(self) -> bool {
        matches!(self, Method::Unient | Method::UnientPlus)
    }

    pub fn takes_gradient_steps(self) -> bool {
        matches!(self, Method::Tent | Method::Unient | Method::UnientPlus)
    }
}

/// Only the batch-norm affine parameters are ever optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptParamScope {
    #[default]
    BnAffineOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub method: Method,
    /// Weight of the pseudo-csOOD entropy (maximized).
    pub lambda1: f64,
    /// Weight of the batch-marginal entropy (maximized).
    pub lambda2: f64,
    /// Marginal-entropy weight for the tent method; 0 is plain TENT.
    pub lambda_tent: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub param_scope: AdaptParamScope,
    /// Warm-start each batch's GMM fit from the previous batch's fit.
    pub gmm_warm_start: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Unient,
            lambda1: 0.2,
            lambda2: 0.2,
            lambda_tent: 0.0,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            param_scope: AdaptParamScope::BnAffineOnly,
            gmm_warm_start: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda_tent < 0.0 {
            return Err(Error::InvalidConfig("lambda weights must be >= 0".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn with_method(&self, method: Method) -> AdaptConfig {
        AdaptConfig {
            method,
            ..self.clone()
        }
    }
}

/// The three scalar pieces every objective is assembled from. Values are
/// the graph nodes; the composed loss is their weighted sum.
pub struct LossParts {
    /// Mean entropy over the (pseudo-)csID side; zero node if empty.
    pub csid_term: Var,
    /// Mean entropy over the (pseudo-)csOOD side; zero node if empty.
    pub csood_term: Var,
    /// Entropy of the batch-mean prediction vector.
    pub marginal_term: Var,
    /// csid - lambda1 * csood - lambda2 * marginal.
    pub loss: Var,
}

/// `q[i,c] = p[i,c] * log p[i,c]` (clamped log), shared by every term.
fn plogp(g: &mut Graph, probs: Var) -> Result<Var> {
    let lp = g.log(probs)?;
    g.elementwise_mul(probs, lp)
}

/// `-sum(q .* row_weights) / denom` where `row_weights` puts `weights[i]`
/// on every column of row i.
fn weighted_entropy(g: &mut Graph, q: Var, weights: &[f64], denom: f64) -> Result<Var> {
    let (m, c) = (g.value(q).rows(), g.value(q).cols());
    let mut mask = vec![0.0; m * c];
    for (i, &w) in weights.iter().enumerate() {
        for j in 0..c {
            mask[i * c + j] = w;
        }
    }
    let mask = g.constant(Tensor::new(vec![m, c], mask)?);
    let masked = g.elementwise_mul(q, mask)?;
    let s = g.sum(masked)?;
    g.mul_scalar(s, -1.0 / denom)
}

/// Entropy of the batch-averaged prediction vector.
fn marginal_entropy(g: &mut Graph, probs: Var) -> Result<Var> {
    let fbar = g.mean_rows(probs)?;
    let lf = g.log(fbar)?;
    let q = g.elementwise_mul(fbar, lf)?;
    let s = g.sum(q)?;
    g.mul_scalar(s, -1.0)
}

fn compose(
    g: &mut Graph,
    csid_term: Var,
    csood_term: Var,
    marginal_term: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let neg_ood = g.mul_scalar(csood_term, -lambda1)?;
    let partial = g.add(csid_term, neg_ood)?;
    let neg_marg = g.mul_scalar(marginal_term, -lambda2)?;
    let loss = g.add(partial, neg_marg)?;
    Ok(LossParts {
        csid_term,
        csood_term,
        marginal_term,
        loss,
    })
}

/// Hard-split objective: mean entropy over pseudo-csID rows, minus lambda1
/// times mean entropy over pseudo-csOOD rows, minus lambda2 times the
/// marginal entropy over all rows. Empty sides contribute zero.
pub fn unient_loss(
    g: &mut Graph,
    probs: Var,
    csid_idx: &[usize],
    csood_idx: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let m = g.value(probs).rows();
    let q = plogp(g, probs)?;
    let subset_term = |g: &mut Graph, q: Var, idx: &[usize]| -> Result<Var> {
        if idx.is_empty() {
            Ok(g.constant(Tensor::scalar(0.0)))
        } else {
            let mut w = vec![0.0; m];
            for &i in idx {
                w[i] = 1.0;
            }
            weighted_entropy(g, q, &w, idx.len() as f64)
        }
    };
    let csid_term = subset_term(g, q, csid_idx)?;
    let csood_term = subset_term(g, q, csood_idx)?;
    let marginal_term = marginal_entropy(g, probs)?;
    compose(g, csid_term, csood_term, marginal_term, lambda1, lambda2)
}

/// Confidence-weighted objective: both entropy sums run over the whole
/// batch, weighted by the posterior (resp. its complement) and normalized
/// by the batch size. Posteriors are constants; no gradient flows into them.
pub fn unient_plus_loss(
    g: &mut Graph,
    probs: Var,
    pi: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let m = g.value(probs).rows();
    debug_assert_eq!(pi.len(), m);
    let q = plogp(g, probs)?;
    let csid_term = weighted_entropy(g, q, pi, m as f64)?;
    let anti: Vec<f64> = pi.iter().map(|&p| 1.0 - p).collect();
    let csood_term = weighted_entropy(g, q, &anti, m as f64)?;
    let marginal_term = marginal_entropy(g, probs)?;
    compose(g, csid_term, csood_term, marginal_term, lambda1, lambda2)
}

/// TENT objective: mean entropy over all rows, optionally minus a marginal
/// entropy term (`lambda_tent`).
pub fn tent_loss(g: &mut Graph, probs: Var, lambda_tent: f64) -> Result<LossParts> {
    let m = g.value(probs).rows();
    let q = plogp(g, probs)?;
    let csid_term = weighted_entropy(g, q, &vec![1.0; m], m as f64)?;
    let csood_term = weighted_entropy(g, q, &vec![0.0; m], m as f64)?;
    let marginal_term = marginal_entropy(g, probs)?;
    compose(g, csid_term, csood_term, marginal_term, 0.0, lambda_tent)
}

/// Result of one online step: the logits recorded before any parameter
/// update, plus the loss value for gradient methods.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Tensor,
    pub loss: Option<f64>,
}

/// Process one batch: forward (batch statistics for everything but
/// `source`), record predictions, then — for gradient methods — backprop
/// the objective and apply Adam to the BN affine parameters only.
pub fn adapt_step(
    model: &mut ModelState,
    x: &Tensor,
    cfg: &AdaptConfig,
    filter: Option<&FilterOutput>,
    opt: &mut OptimizerState,
) -> Result<StepOutput> {
    cfg.validate()?;
    match cfg.method {
        Method::Source => {
            let out = model.forward(x, StatsMode::Running)?;
            Ok(StepOutput {
                logits: out.logits,
                loss: None,
            })
        }
        Method::BnAdapt => {
            let out = model.forward(x, StatsMode::Batch)?;
            Ok(StepOutput {
                logits: out.logits,
                loss: None,
            })
        }
        Method::Tent | Method::Unient | Method::UnientPlus => {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let fwd =
                model.forward_on_graph(&mut g, xv, StatsMode::Batch, ParamScope::BnAffineOnly)?;
            let logits = g.value(fwd.logits).clone();

            let parts = match cfg.method {
                Method::Tent => tent_loss(&mut g, fwd.probs, cfg.lambda_tent)?,
                Method::Unient => {
                    let f = filter.ok_or(Error::MissingFilter("unient"))?;
                    unient_loss(
                        &mut g,
                        fwd.probs,
                        &f.csid_idx,
                        &f.csood_idx,
                        cfg.lambda1,
                        cfg.lambda2,
                    )?
                }
                Method::UnientPlus => {
                    let f = filter.ok_or(Error::MissingFilter("unient_plus"))?;
                    unient_plus_loss(&mut g, fwd.probs, &f.posteriors, cfg.lambda1, cfg.lambda2)?
                }
                _ => unreachable!(),
            };

            let loss_val = g.value(parts.loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} loss = {loss_val}",
                    cfg.method.name()
                )));
            }
            g.backward(parts.loss)?;

            let ids: Vec<ParamId> = fwd.trainable.iter().map(|(id, _)| *id).collect();
            let grads: Vec<Vec<f64>> = fwd
                .trainable
                .iter()
                .map(|&(id, var)| grad_in_model_layout(&g, id, var))
                .collect();
            crate::nn::apply_update(model, &ids, &grads, &cfg.adam(), opt);

            Ok(StepOutput {
                logits,
                loss: Some(loss_val),
            })
        }
    }
}

/// Adam state sized for the BN affine parameters, in the same order
/// `forward_on_graph` emits them.
pub fn bn_optimizer(model: &ModelState) -> OptimizerState {
    let mut sizes = Vec::new();
    for layer in &model.layers {
        sizes.push(layer.gamma.numel());
        sizes.push(layer.beta.numel());
    }
    OptimizerState::new(&sizes)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub score_kind: ScoreKind,
    /// Collect (score, posterior, true_is_csood) rows for the diagnostic
    /// dump.
    pub collect_score_dump: bool,
    /// Keep the pre-update logits of every batch (tests use this to check
    /// causality bit-for-bit).
    pub collect_predictions: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            score_kind: ScoreKind::Energy,
            collect_score_dump: false,
            collect_predictions: false,
        }
    }
}

/// One diagnostic dump row.
#[derive(Debug, Clone, Copy)]
pub struct ScoreDumpRow {
    pub score: f64,
    pub posterior: f64,
    pub true_is_csood: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub final_model: ModelState,
    pub score_dump: Vec<ScoreDumpRow>,
    /// Pre-update logits per batch, when requested.
    pub predictions: Vec<Tensor>,
}

/// Drive the full online protocol: iterate batches in order, filter (for
/// the UniEnt methods) with a frozen copy of the initial model, adapt, and
/// accumulate metrics from each batch's pre-update logits. Parameters are
/// never reset between domains.
pub fn run_stream(
    model0: &ModelState,
    stream: impl IntoIterator<Item = LabeledBatch>,
    cfg: &AdaptConfig,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = model0.clone();
    let frozen = model0.clone();
    let prototypes = frozen.prototypes();
    let mut opt = bn_optimizer(&model);
    let mut eval = StreamEval::new(opts.score_kind);
    let mut dump = Vec::new();
    let mut predictions = Vec::new();
    let mut warm: Option<GmmParams> = None;

    for (index, batch) in stream.into_iter().enumerate() {
        let filter_out = if cfg.method.uses_filter() {
            let f = run_filter(&frozen, &prototypes, &batch.x, warm.as_ref())?;
            if cfg.gmm_warm_start {
                warm = Some(f.gmm.clone());
            }
            Some(f)
        } else {
            None
        };

        let step =
            adapt_step(&mut model, &batch.x, cfg, filter_out.as_ref(), &mut opt).map_err(|e| {
                match e {
                    Error::NonFinite(_) => Error::LossDiverged {
                        method: cfg.method.name().to_string(),
                        batch: index,
                    },
                    other => other,
                }
            })?;

        if opts.collect_score_dump {
            if let Some(f) = &filter_out {
                for i in 0..batch.is_csood.len() {
                    dump.push(ScoreDumpRow {
                        score: f.scores[i],
                        posterior: f.posteriors[i],
                        true_is_csood: batch.is_csood[i],
                    });
                }
            }
        }

        eval.push_batch(
            &step.logits,
            &batch.y,
            &batch.is_csood,
            batch.domain,
            filter_out.as_ref(),
        );
        if opts.collect_predictions {
            predictions.push(step.logits);
        }
    }

    Ok(RunOutcome {
        report: eval.finalize(),
        final_model: model,
        score_dump: dump,
        predictions,
    })
}
