//! Open-set evaluation: csID accuracy, AUROC, FPR@TPR95, OSCR, and the
//! ID-confidence scores (energy / MSP / max-logit) they run on. The stream
//! accumulator buffers per-sample scores so streaming results are identical
//! to one-shot computation over the concatenated stream.

use serde::{Deserialize, Serialize};

use crate::bench::DomainSpec;
use crate::error::{Error, Result};
use crate::filter::FilterOutput;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Energy,
    Msp,
    MaxLogit,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Energy, ScoreKind::Msp, ScoreKind::MaxLogit];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Msp => "msp",
            ScoreKind::MaxLogit => "max_logit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown score kind `{s}`")))
    }
}

/// ID-confidence of one logit row; higher means more in-distribution.
/// Energy is logsumexp (the negative free energy), MSP the max softmax
/// probability, max-logit the raw maximum.
pub fn id_confidence(logits: &[f64], kind: ScoreKind) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match kind {
        ScoreKind::Energy => {
            let s: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
            mx + s.ln()
        }
        ScoreKind::Msp => {
            let s: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
            1.0 / s
        }
        ScoreKind::MaxLogit => mx,
    }
}

/// Mann-Whitney rank statistic with tie correction:
/// P(id > ood) + P(id = ood)/2. `None` if either side is empty.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Option<f64> {
    let (n1, n2) = (id_scores.len(), ood_scores.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    // Average ranks over the pooled sample.
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = pooled.len();
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Tied block [i, j]: average rank (1-based).
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &pooled[i..=j] {
            if item.1 {
                rank_sum_id += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_id - (n1 * (n1 + 1)) as f64 / 2.0;
    Some(u / (n1 as f64 * n2 as f64))
}

/// False positive rate on csOOD at the threshold admitting at least
/// `tpr_target` of the csID scores. The threshold is the largest value
/// accepting ceil(target * n1) csID samples (ties included by >=).
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Option<f64> {
    let (n1, n2) = (id_scores.len(), ood_scores.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let mut sorted: Vec<f64> = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap()); // descending
                                                      // Smallest k with k/n1 >= target.
    let mut k = n1;
    for cand in 1..=n1 {
        if cand as f64 / n1 as f64 >= tpr_target {
            k = cand;
            break;
        }
    }
    let tau = sorted[k - 1];
    let fp = ood_scores.iter().filter(|&&s| s >= tau).count();
    Some(fp as f64 / n2 as f64)
}

/// Ground truth for one scored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Csid { class: usize },
    Csood,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoredSample {
    pub confidence: f64,
    pub predicted: usize,
    pub truth: Truth,
}

/// Open-set classification rate: area under correct-classification-rate vs
/// false-positive-rate as the confidence threshold sweeps from +inf down
/// through every observed value. The curve is anchored at (0,0) and ends at
/// (1, CCR with everything admitted). `None` without both csID and csOOD
/// samples.
pub fn oscr(samples: &[ScoredSample]) -> Option<f64> {
    let n_csid = samples
        .iter()
        .filter(|s| matches!(s.truth, Truth::Csid { .. }))
        .count();
    let n_csood = samples.len() - n_csid;
    if n_csid == 0 || n_csood == 0 {
        return None;
    }

    let mut thresholds: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    // Sweep descending; counts are cumulative over samples with
    // confidence >= tau.
    let mut points = vec![(0.0f64, 0.0f64)]; // (FPR, CCR) at tau = +inf
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut correct_admitted = 0usize;
    let mut ood_admitted = 0usize;
    let mut cursor = 0usize;
    for &tau in &thresholds {
        while cursor < sorted.len() && sorted[cursor].confidence >= tau {
            match sorted[cursor].truth {
                Truth::Csid { class } => {
                    if sorted[cursor].predicted == class {
                        correct_admitted += 1;
                    }
                }
                Truth::Csood => ood_admitted += 1,
            }
            cursor += 1;
        }
        points.push((
            ood_admitted as f64 / n_csood as f64,
            correct_admitted as f64 / n_csid as f64,
        ));
    }

    let mut area = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Some(area)
}

/// csID top-1 accuracy; csOOD samples are ignored entirely.
pub fn csid_accuracy(samples: &[ScoredSample]) -> Option<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for s in samples {
        if let Truth::Csid { class } = s.truth {
            n += 1;
            if s.predicted == class {
                correct += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some(correct as f64 / n as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Per-batch filter diagnostics (precision/recall of the pseudo-csOOD split
/// against ground truth).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchDiag {
    pub index: usize,
    pub domain: DomainSpec,
    pub n_true_csood: usize,
    pub n_pseudo_csood: Option<usize>,
    pub filter_precision: Option<f64>,
    pub filter_recall: Option<f64>,
    pub filter_degenerate: Option<bool>,
}

/// Metrics for one slice of the stream (percent units).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBlock {
    pub n_csid: usize,
    pub n_csood: usize,
    pub acc: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr_at_tpr95: Option<f64>,
    pub oscr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainBreakdown {
    pub kind: String,
    pub severity: u8,
    #[serde(flatten)]
    pub metrics: MetricBlock,
}

/// Stream-level evaluation report. Rates are percentages; `None` marks
/// undefined values (empty sides).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_kind: ScoreKind,
    #[serde(flatten)]
    pub overall: MetricBlock,
    pub per_domain: Vec<DomainBreakdown>,
    pub per_batch: Vec<BatchDiag>,
}

impl EvalReport {
    /// Mean per-batch split precision/recall over batches where the filter
    /// produced a defined value.
    pub fn mean_filter_precision_recall(&self) -> (Option<f64>, Option<f64>) {
        let precisions: Vec<f64> = self
            .per_batch
            .iter()
            .filter_map(|b| b.filter_precision)
            .collect();
        let recalls: Vec<f64> = self
            .per_batch
            .iter()
            .filter_map(|b| b.filter_recall)
            .collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        (mean(&precisions), mean(&recalls))
    }
}

/// Accumulates per-batch logits and ground truth; finalization computes the
/// report. All heavy work happens at finalize over the buffered samples, so
/// streaming accumulation is exactly one-shot computation.
#[derive(Debug, Clone)]
pub struct StreamEval {
    score_kind: ScoreKind,
    samples: Vec<ScoredSample>,
    sample_domain: Vec<usize>,
    domains: Vec<DomainSpec>,
    batch_diags: Vec<BatchDiag>,
}

impl StreamEval {
    pub fn new(score_kind: ScoreKind) -> Self {
        Self {
            score_kind,
            samples: Vec::new(),
            sample_domain: Vec::new(),
            domains: Vec::new(),
            batch_diags: Vec::new(),
        }
    }

    pub fn push_batch(
        &mut self,
        logits: &Tensor,
        y: &[usize],
        is_csood: &[bool],
        domain: DomainSpec,
        filter: Option<&FilterOutput>,
    ) {
        let domain_idx = match self.domains.iter().position(|d| *d == domain) {
            Some(i) => i,
            None => {
                self.domains.push(domain);
                self.domains.len() - 1
            }
        };
        for i in 0..logits.rows() {
            let row = logits.row(i);
            self.samples.push(ScoredSample {
                confidence: id_confidence(row, self.score_kind),
                predicted: argmax(row),
                truth: if is_csood[i] {
                    Truth::Csood
                } else {
                    Truth::Csid { class: y[i] }
                },
            });
            self.sample_domain.push(domain_idx);
        }

        let n_true = is_csood.iter().filter(|&&o| o).count();
        let diag = match filter {
            Some(f) => {
                let n_pseudo = f.csood_idx.len();
                let hits = f.csood_idx.iter().filter(|&&i| is_csood[i]).count();
                BatchDiag {
                    index: self.batch_diags.len(),
                    domain,
                    n_true_csood: n_true,
                    n_pseudo_csood: Some(n_pseudo),
                    filter_precision: if n_pseudo > 0 {
                        Some(hits as f64 / n_pseudo as f64)
                    } else {
                        None
                    },
                    filter_recall: if n_true > 0 {
                        Some(hits as f64 / n_true as f64)
                    } else {
                        None
                    },
                    filter_degenerate: Some(f.degenerate),
                }
            }
            None => BatchDiag {
                index: self.batch_diags.len(),
                domain,
                n_true_csood: n_true,
                n_pseudo_csood: None,
                filter_precision: None,
                filter_recall: None,
                filter_degenerate: None,
            },
        };
        self.batch_diags.push(diag);
    }

    pub fn finalize(&self) -> EvalReport {
        let overall = block_of(&self.samples);
        let per_domain = self
            .domains
            .iter()
            .enumerate()
            .map(|(di, d)| {
                let subset: Vec<ScoredSample> = self
                    .samples
                    .iter()
                    .zip(&self.sample_domain)
                    .filter(|(_, &sd)| sd == di)
                    .map(|(s, _)| *s)
                    .collect();
                DomainBreakdown {
                    kind: d.kind.name().to_string(),
                    severity: d.severity,
                    metrics: block_of(&subset),
                }
            })
            .collect();
        EvalReport {
            score_kind: self.score_kind,
            overall,
            per_domain,
            per_batch: self.batch_diags.clone(),
        }
    }
}

fn block_of(samples: &[ScoredSample]) -> MetricBlock {
    let id_scores: Vec<f64> = samples
        .iter()
        .filter(|s| matches!(s.truth, Truth::Csid { .. }))
        .map(|s| s.confidence)
        .collect();
    let ood_scores: Vec<f64> = samples
        .iter()
        .filter(|s| matches!(s.truth, Truth::Csood))
        .map(|s| s.confidence)
        .collect();
    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    MetricBlock {
        n_csid: id_scores.len(),
        n_csood: ood_scores.len(),
        acc: pct(csid_accuracy(samples)),
        auroc: pct(auroc(&id_scores, &ood_scores)),
        fpr_at_tpr95: pct(fpr_at_tpr(&id_scores, &ood_scores, 0.95)),
        oscr: pct(oscr(samples)),
    }
}
