//! Deterministic synthetic open-set benchmark: Gaussian source clusters for
//! known classes, held-out clusters for unknown classes, and a corrupted
//! target stream that mixes both at a configurable ratio across a sequence
//! of domains.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, substream};
use crate::tensor::Tensor;

/// Input corruption families. Parameters of each family are seeded per
/// benchmark; severity only scales their strength, so severities of one
/// kind share the same underlying transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussNoise,
    MultNoise,
    Rotate,
    ScaleShift,
    Mask,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::MultNoise,
        CorruptionKind::Rotate,
        CorruptionKind::ScaleShift,
        CorruptionKind::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussNoise => "gauss_noise",
            CorruptionKind::MultNoise => "mult_noise",
            CorruptionKind::Rotate => "rotate",
            CorruptionKind::ScaleShift => "scale_shift",
            CorruptionKind::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown corruption kind `{s}`")))
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u64
    }
}

/// One target domain: a corruption kind at a severity in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Input dimensionality.
    pub d: usize,
    /// Known (source) class count.
    pub c_s: usize,
    /// Held-out unknown class count.
    pub c_open: usize,
    /// Minimum pairwise distance between cluster means, in units of the
    /// unit cluster standard deviation.
    pub cluster_separation: f64,
    pub corruption_sequence: Vec<DomainSpec>,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    /// csOOD count / csID count per batch, in [0, 1].
    pub csood_ratio: f64,
    /// How many of the `c_open` unknown clusters actually feed the stream.
    pub unknown_class_count_active: usize,
    pub repeat_rounds: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            d: 16,
            c_s: 8,
            c_open: 4,
            cluster_separation: 6.0,
            corruption_sequence: CorruptionKind::ALL
                .into_iter()
                .map(|kind| DomainSpec { kind, severity: 5 })
                .collect(),
            batches_per_domain: 200,
            batch_size: 200,
            csood_ratio: 1.0,
            unknown_class_count_active: 4,
            repeat_rounds: 1,
            seed: 42,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.c_s < 2 {
            return fail(format!("c_s must be >= 2, got {}", self.c_s));
        }
        if self.c_open < 1 {
            return fail(format!("c_open must be >= 1, got {}", self.c_open));
        }
        if !(0.0..=1.0).contains(&self.csood_ratio) {
            return fail(format!(
                "csood_ratio must be in [0,1], got {}",
                self.csood_ratio
            ));
        }
        if self.unknown_class_count_active > self.c_open {
            return fail(format!(
                "unknown_class_count_active {} exceeds c_open {}",
                self.unknown_class_count_active, self.c_open
            ));
        }
        if self.csood_ratio > 0.0 && self.unknown_class_count_active == 0 {
            return fail("csood_ratio > 0 requires at least one active unknown class".into());
        }
        if self.repeat_rounds < 1 {
            return fail("repeat_rounds must be >= 1".into());
        }
        if self.batches_per_domain < 1 {
            return fail("batches_per_domain must be >= 1".into());
        }
        for dsp in &self.corruption_sequence {
            if !(1..=5).contains(&dsp.severity) {
                return fail(format!("severity must be in 1..=5, got {}", dsp.severity));
            }
        }
        let (n_csid, _) = self.batch_split();
        if n_csid < 1 {
            return fail("batch split yields no csID samples".into());
        }
        if !self.cluster_separation.is_finite() || self.cluster_separation <= 0.0 {
            return fail("cluster_separation must be positive".into());
        }
        Ok(())
    }

    /// (csID count, csOOD count) per batch implied by `batch_size` and
    /// `csood_ratio`.
    pub fn batch_split(&self) -> (usize, usize) {
        let n_csid = (self.batch_size as f64 / (1.0 + self.csood_ratio)).round() as usize;
        let n_csid = n_csid.min(self.batch_size);
        (n_csid, self.batch_size - n_csid)
    }

    pub fn total_batches(&self) -> usize {
        self.batches_per_domain * self.corruption_sequence.len() * self.repeat_rounds
    }
}

/// A mini-batch with hidden ground truth. Adaptation consumes `x` only;
/// `y` and `is_csood` are for the metrics side.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Tensor,
    /// Class ids; csOOD rows carry ids >= c_s.
    pub y: Vec<usize>,
    pub is_csood: Vec<bool>,
    pub domain: DomainSpec,
}

/// Cluster means for known and unknown classes, placed by a seeded
/// rejection sampler. csOOD means keep a relaxed 0.6x separation from csID
/// means so unknown classes stay confusable with known ones.
#[derive(Debug, Clone)]
pub struct ClusterLayout {
    pub csid_means: Vec<Vec<f64>>,
    pub csood_means: Vec<Vec<f64>>,
}

const PLACEMENT_ATTEMPTS: usize = 10_000;
const CSOOD_SEPARATION_FACTOR: f64 = 0.6;
/// Scales the placement box: typical pairwise distance lands at roughly
/// this multiple of the separation.
const BOX_FACTOR: f64 = 2.3;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn cluster_layout(cfg: &BenchmarkConfig) -> Result<ClusterLayout> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, "clusters", &[]);
    // Random points in a box of half-width L concentrate at pairwise
    // distance sqrt(2d/3)*L; pick L so that typical distances sit just
    // above the enforced minimum rather than far beyond it.
    let half_width = BOX_FACTOR * cfg.cluster_separation * (3.0 / (2.0 * cfg.d as f64)).sqrt();
    let sep = cfg.cluster_separation;

    let mut csid: Vec<Vec<f64>> = Vec::with_capacity(cfg.c_s);
    for idx in 0..cfg.c_s {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..cfg.d)
                .map(|_| rng.random_range(-half_width..half_width))
                .collect();
            if csid.iter().all(|m| dist(m, &cand) >= sep) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(m) => csid.push(m),
            None => {
                return Err(Error::InfeasibleSeparation {
                    index: idx,
                    separation: sep,
                    dim: cfg.d,
                    attempts: PLACEMENT_ATTEMPTS,
                })
            }
        }
    }

    let mut csood: Vec<Vec<f64>> = Vec::with_capacity(cfg.c_open);
    for idx in 0..cfg.c_open {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..cfg.d)
                .map(|_| rng.random_range(-half_width..half_width))
                .collect();
            // Unknown clusters keep a relaxed margin to known means, so
            // they stay closer to the known manifold than known clusters
            // are to each other.
            let ok_id = csid
                .iter()
                .all(|m| dist(m, &cand) >= CSOOD_SEPARATION_FACTOR * sep);
            let ok_ood = csood.iter().all(|m| dist(m, &cand) >= sep);
            if ok_id && ok_ood {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(m) => csood.push(m),
            None => {
                return Err(Error::InfeasibleSeparation {
                    index: cfg.c_s + idx,
                    separation: sep,
                    dim: cfg.d,
                    attempts: PLACEMENT_ATTEMPTS,
                })
            }
        }
    }

    Ok(ClusterLayout {
        csid_means: csid,
        csood_means: csood,
    })
}

/// Uncorrupted labeled draws from the known-class clusters.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Sample `n_per_class` points from each known-class cluster (unit
/// covariance). `tag` names the sub-stream, so train and test splits are
/// independent.
pub fn make_source(cfg: &BenchmarkConfig, n_per_class: usize, tag: &str) -> Result<SourceData> {
    let layout = cluster_layout(cfg)?;
    let mut rng = stream_rng(cfg.seed, tag, &[]);
    let n = n_per_class * cfg.c_s;
    let mut data = Vec::with_capacity(n * cfg.d);
    let mut y = Vec::with_capacity(n);
    // Draw class by class, then shuffle rows.
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(n);
    for (c, mean) in layout.csid_means.iter().enumerate() {
        for _ in 0..n_per_class {
            let p: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push((c, p));
        }
    }
    for i in (1..rows.len()).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    for (c, p) in rows {
        y.push(c);
        data.extend_from_slice(&p);
    }
    Ok(SourceData {
        x: Tensor::new(vec![n, cfg.d], data)?,
        y,
    })
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

const GAUSS_SIGMA_PER_SEVERITY: f64 = 0.18;
const MULT_SIGMA_PER_SEVERITY: f64 = 0.06;
const ROTATE_MAX_ANGLE: f64 = std::f64::consts::PI / 6.0;
const SCALE_RANGE: f64 = 0.4;
const SHIFT_RANGE: f64 = 1.5;
const MASK_MAX_FRACTION: f64 = 0.15;

/// Noise standard deviation of `gauss_noise` at a given severity.
pub fn gauss_sigma(severity: u8) -> f64 {
    GAUSS_SIGMA_PER_SEVERITY * severity as f64
}

/// Apply a corruption. `param_seed` fixes the transform family parameters
/// (shared by every batch of a domain); `draw_seed` fixes the per-call noise
/// realization. Deterministic in all arguments.
pub fn corrupt(
    x: &Tensor,
    kind: CorruptionKind,
    severity: u8,
    param_seed: u64,
    draw_seed: u64,
) -> Result<Tensor> {
    if !(1..=5).contains(&severity) {
        return Err(Error::InvalidConfig(format!(
            "severity must be in 1..=5, got {severity}"
        )));
    }
    let alpha = severity as f64 / 5.0;
    corrupt_with_strength(x, kind, alpha, severity, param_seed, draw_seed)
}

/// Internal strength-parameterized form; `alpha = 0` is the identity for
/// every kind.
pub(crate) fn corrupt_with_strength(
    x: &Tensor,
    kind: CorruptionKind,
    alpha: f64,
    severity: u8,
    param_seed: u64,
    draw_seed: u64,
) -> Result<Tensor> {
    let (m, d) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    let mut params = stream_rng(param_seed, "corrupt-params", &[kind.index()]);
    let mut draw = stream_rng(draw_seed, "corrupt-draw", &[kind.index(), severity as u64]);

    match kind {
        CorruptionKind::GaussNoise => {
            let sigma = GAUSS_SIGMA_PER_SEVERITY * 5.0 * alpha;
            for v in &mut out {
                *v += sigma * draw.sample::<f64, _>(StandardNormal);
            }
        }
        CorruptionKind::MultNoise => {
            let sigma = MULT_SIGMA_PER_SEVERITY * 5.0 * alpha;
            for v in &mut out {
                *v *= 1.0 + sigma * draw.sample::<f64, _>(StandardNormal);
            }
        }
        CorruptionKind::Rotate => {
            // Disjoint seeded coordinate pairs, each rotated by alpha times
            // its base angle. Block structure keeps the map exactly
            // orthogonal at every strength.
            let mut perm: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = params.random_range(0..=i);
                perm.swap(i, j);
            }
            let planes: Vec<(usize, usize, f64)> = (0..d / 2)
                .map(|k| {
                    let theta = params.random_range(ROTATE_MAX_ANGLE / 2.0..ROTATE_MAX_ANGLE)
                        * if params.random_range(0..2) == 0 {
                            1.0
                        } else {
                            -1.0
                        };
                    (perm[2 * k], perm[2 * k + 1], theta)
                })
                .collect();
            for i in 0..m {
                let row = &mut out[i * d..(i + 1) * d];
                for &(a, b, theta) in &planes {
                    let t = alpha * theta;
                    let (s, c) = t.sin_cos();
                    let (va, vb) = (row[a], row[b]);
                    row[a] = c * va - s * vb;
                    row[b] = s * va + c * vb;
                }
            }
        }
        CorruptionKind::ScaleShift => {
            let scale: Vec<f64> = (0..d)
                .map(|_| 1.0 + alpha * params.random_range(-SCALE_RANGE..SCALE_RANGE))
                .collect();
            let shift: Vec<f64> = (0..d)
                .map(|_| alpha * params.random_range(-SHIFT_RANGE..SHIFT_RANGE))
                .collect();
            for i in 0..m {
                let row = &mut out[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] = row[j] * scale[j] + shift[j];
                }
            }
        }
        CorruptionKind::Mask => {
            // Severity masks a growing prefix of one seeded permutation, so
            // higher severities mask supersets of lower ones.
            let mut perm: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = params.random_range(0..=i);
                perm.swap(i, j);
            }
            let count = (MASK_MAX_FRACTION * d as f64 * alpha).round() as usize;
            for i in 0..m {
                let row = &mut out[i * d..(i + 1) * d];
                for &j in perm.iter().take(count) {
                    row[j] = 0.0;
                }
            }
        }
    }
    Tensor::new(vec![m, d], out)
}

// ---------------------------------------------------------------------------
// Stream
// ---------------------------------------------------------------------------

/// Online iterator over the corrupted open-set target stream. Pure function
/// of (config, draw seed, batch index): each batch is generated from its
/// own derived sub-stream. `cfg.seed` fixes the world (cluster layout and
/// corruption transform parameters); `draw_seed` fixes the sample draws and
/// noise realizations, so independent test streams can share one world.
pub struct Stream {
    cfg: BenchmarkConfig,
    layout: ClusterLayout,
    draw_seed: u64,
    next_index: usize,
    total: usize,
}

impl Stream {
    pub fn config(&self) -> &BenchmarkConfig {
        &self.cfg
    }

    fn generate(&self, index: usize) -> Result<LabeledBatch> {
        let cfg = &self.cfg;
        let domains = &cfg.corruption_sequence;
        let per_round = cfg.batches_per_domain * domains.len();
        let within_round = index % per_round;
        let domain = domains[within_round / cfg.batches_per_domain];

        let (n_csid, n_csood) = cfg.batch_split();
        let mut rng = stream_rng(self.draw_seed, "batch", &[index as u64]);

        let mut rows: Vec<(usize, bool, Vec<f64>)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..n_csid {
            let c = rng.random_range(0..cfg.c_s);
            let mean = &self.layout.csid_means[c];
            let p: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push((c, false, p));
        }
        for _ in 0..n_csood {
            let k = rng.random_range(0..cfg.unknown_class_count_active);
            let mean = &self.layout.csood_means[k];
            let p: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push((cfg.c_s + k, true, p));
        }
        for i in (1..rows.len()).rev() {
            let j = rng.random_range(0..=i);
            rows.swap(i, j);
        }

        let mut data = Vec::with_capacity(rows.len() * cfg.d);
        let mut y = Vec::with_capacity(rows.len());
        let mut is_csood = Vec::with_capacity(rows.len());
        for (label, ood, p) in rows {
            y.push(label);
            is_csood.push(ood);
            data.extend_from_slice(&p);
        }
        let clean = Tensor::new(vec![cfg.batch_size, cfg.d], data)?;

        // Transform parameters are domain-indexed (independent of position
        // in the sequence); the noise realization is per batch. csID and
        // csOOD rows pass through the same call, hence identical transforms.
        let param_seed = substream(cfg.seed, "domain-params", &[]);
        let draw_seed = substream(self.draw_seed, "domain-draw", &[index as u64]);
        let x = corrupt(&clean, domain.kind, domain.severity, param_seed, draw_seed)?;

        Ok(LabeledBatch {
            x,
            y,
            is_csood,
            domain,
        })
    }
}

impl Iterator for Stream {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.next_index >= self.total {
            return None;
        }
        let batch = self
            .generate(self.next_index)
            .expect("validated config generates batches");
        self.next_index += 1;
        Some(batch)
    }
}

/// Build the target stream for a validated config, with draws seeded by
/// the config's own seed.
pub fn stream(cfg: &BenchmarkConfig) -> Result<Stream> {
    stream_with_draws(cfg, cfg.seed)
}

/// Build a target stream over `cfg`'s world with an independent draw seed.
/// Different draw seeds yield different sample streams against identical
/// clusters and corruption transforms.
pub fn stream_with_draws(cfg: &BenchmarkConfig, draw_seed: u64) -> Result<Stream> {
    cfg.validate()?;
    let layout = cluster_layout(cfg)?;
    Ok(Stream {
        total: cfg.total_batches(),
        cfg: cfg.clone(),
        layout,
        draw_seed,
        next_index: 0,
    })
}

// ---------------------------------------------------------------------------
// CSV dump/load
// ---------------------------------------------------------------------------

/// Write batches as CSV: `x0..x{d-1},y,is_csood,domain_kind,severity`.
pub fn dump_csv(batches: &[LabeledBatch], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let d = batches.first().map_or(0, |b| b.x.cols());
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend([
        "y".into(),
        "is_csood".into(),
        "domain_kind".into(),
        "severity".into(),
    ]);
    writeln!(w, "{}", header.join(","))?;
    for b in batches {
        for i in 0..b.x.rows() {
            let mut fields: Vec<String> = b.x.row(i).iter().map(|v| format!("{v}")).collect();
            fields.push(format!("{}", b.y[i]));
            fields.push(format!("{}", u8::from(b.is_csood[i])));
            fields.push(b.domain.kind.name().to_string());
            fields.push(format!("{}", b.domain.severity));
            writeln!(w, "{}", fields.join(","))?;
        }
    }
    Ok(())
}

/// Read a dump back, regrouping rows into batches of `batch_size` (domain
/// changes also force a boundary).
pub fn load_csv(path: &Path, batch_size: usize) -> Result<Vec<LabeledBatch>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::BadCsv {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 {
        return Err(Error::BadCsv {
            line: 1,
            msg: "expected x0..,y,is_csood,domain_kind,severity".into(),
        });
    }
    let d = cols.len() - 4;

    struct Row {
        x: Vec<f64>,
        y: usize,
        ood: bool,
        domain: DomainSpec,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::BadCsv {
            line: ln + 2,
            msg: msg.into(),
        };
        if parts.len() != d + 4 {
            return Err(bad("wrong field count"));
        }
        let mut x = Vec::with_capacity(d);
        for p in &parts[..d] {
            x.push(p.parse::<f64>().map_err(|e| bad(&e.to_string()))?);
        }
        let y: usize = parts[d].parse().map_err(|_| bad("bad label"))?;
        let ood = parts[d + 1] == "1" || parts[d + 1] == "true";
        let kind = CorruptionKind::parse(parts[d + 2]).map_err(|_| bad("bad domain kind"))?;
        let severity: u8 = parts[d + 3].parse().map_err(|_| bad("bad severity"))?;
        rows.push(Row {
            x,
            y,
            ood,
            domain: DomainSpec { kind, severity },
        });
    }

    let mut batches = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let domain = rows[start].domain;
        let mut end = start;
        while end < rows.len() && end - start < batch_size && rows[end].domain == domain {
            end += 1;
        }
        let chunk = &rows[start..end];
        let mut data = Vec::with_capacity(chunk.len() * d);
        let mut y = Vec::with_capacity(chunk.len());
        let mut ood = Vec::with_capacity(chunk.len());
        for r in chunk {
            data.extend_from_slice(&r.x);
            y.push(r.y);
            ood.push(r.ood);
        }
        batches.push(LabeledBatch {
            x: Tensor::new(vec![chunk.len(), d], data)?,
            y,
            is_csood: ood,
            domain,
        });
        start = end;
    }
    Ok(batches)
}
