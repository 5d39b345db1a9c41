//! Batch-normalized MLP classifier: forward passes with either batch or
//! running normalization statistics, source-domain pretraining, prototype
//! extraction from the classifier head, and JSON checkpoints.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bench::SourceData;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Current batch mean/variance (BN-Adapt and all gradient-based
    /// adaptation methods).
    Batch,
    /// Stored running statistics (frozen source behavior).
    Running,
}

/// Which parameters become gradient-tracked leaves in a graph forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    None,
    All,
    BnAffineOnly,
}

/// Identifies one parameter tensor within a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
}

/// One hidden block: Linear -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Full parameter state of the classifier. `dims` is
/// `[input, hidden..., classes]`.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub dims: Vec<usize>,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl ModelState {
    /// Fresh model with uniform +-1/sqrt(fan_in) weights, identity BN affine,
    /// and default running statistics (mean 0, var 1).
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::InvalidConfig(
                "architecture needs input, at least one hidden layer, and a class count".into(),
            ));
        }
        let mut rng = stream_rng(seed, "init", &[]);
        let mut layers = Vec::new();
        for li in 0..dims.len() - 2 {
            let (fan_in, fan_out) = (dims[li], dims[li + 1]);
            let w = uniform_init(&mut rng, fan_out, fan_in, fan_in);
            let b = {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<f64> = (0..fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(vec![fan_out], data).unwrap()
            };
            layers.push(LayerParams {
                w,
                b,
                gamma: Tensor::new(vec![fan_out], vec![1.0; fan_out]).unwrap(),
                beta: Tensor::new(vec![fan_out], vec![0.0; fan_out]).unwrap(),
                running_mean: vec![0.0; fan_out],
                running_var: vec![1.0; fan_out],
            });
        }
        let feat = dims[dims.len() - 2];
        let classes = dims[dims.len() - 1];
        let head_w = uniform_init(&mut rng, classes, feat, feat);
        let head_b = {
            let bound = 1.0 / (feat as f64).sqrt();
            let data: Vec<f64> = (0..classes)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::new(vec![classes], data).unwrap()
        };
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            head: HeadParams {
                w: head_w,
                b: head_b,
            },
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn class_count(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// Classifier-head weight rows, copied out as `[classes, feat_dim]`
    /// source prototypes (bias excluded).
    pub fn prototypes(&self) -> Tensor {
        self.head.w.clone()
    }

    /// Run the model on a graph. Returns handles to the last hidden
    /// activations (features), head logits, row-softmax probabilities, the
    /// gradient-tracked parameter leaves (in a fixed order), and the
    /// batchnorm_train nodes per layer when `stats == Batch`.
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        x: Var,
        stats: StatsMode,
        scope: ParamScope,
    ) -> Result<GraphForward> {
        let tx = g.value(x);
        if !tx.is_matrix() || tx.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: if tx.is_matrix() { tx.cols() } else { 0 },
            });
        }
        if !tx.all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        if stats == StatsMode::Batch && tx.rows() < 2 {
            return Err(Error::BatchTooSmall {
                op: "forward(stats=batch)",
                min: 2,
                got: tx.rows(),
            });
        }

        let grad_w = scope == ParamScope::All;
        let grad_bn = scope != ParamScope::None;

        // Weight leaves are registered transposed ([in, out]) so the layer
        // is a single matmul; gradients are transposed back to the stored
        // [out, in] layout when collected.
        let mut trainable = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let wt = g.leaf(transpose(&layer.w), grad_w);
            let b = g.leaf(layer.b.clone(), grad_w);
            let gamma = g.leaf(layer.gamma.clone(), grad_bn);
            let beta = g.leaf(layer.beta.clone(), grad_bn);
            if grad_w {
                trainable.push((ParamId::Weight(li), wt));
                trainable.push((ParamId::Bias(li), b));
            }
            if grad_bn {
                trainable.push((ParamId::Gamma(li), gamma));
                trainable.push((ParamId::Beta(li), beta));
            }

            let mm = g.matmul(h, wt)?;
            let pre = g.add_bias(mm, b)?;
            let bn = match stats {
                StatsMode::Batch => {
                    let node = g.batchnorm_train(pre, gamma, beta)?;
                    bn_nodes.push(node);
                    node
                }
                StatsMode::Running => {
                    g.batchnorm_eval(pre, gamma, beta, &layer.running_mean, &layer.running_var)?
                }
            };
            h = g.relu(bn)?;
        }

        let features = h;
        let hwt = g.leaf(transpose(&self.head.w), grad_w);
        let hb = g.leaf(self.head.b.clone(), grad_w);
        if grad_w {
            trainable.push((ParamId::HeadWeight, hwt));
            trainable.push((ParamId::HeadBias, hb));
        }
        let mm = g.matmul(features, hwt)?;
        let logits = g.add_bias(mm, hb)?;
        let probs = g.softmax_rows(logits)?;

        Ok(GraphForward {
            features,
            logits,
            probs,
            trainable,
            bn_nodes,
        })
    }

    /// Plain (no-grad) forward pass. Runs the same graph code path as
    /// adaptation so the numerics are identical.
    pub fn forward(&self, x: &Tensor, stats: StatsMode) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = self.forward_on_graph(&mut g, xv, stats, ParamScope::None)?;
        Ok(ForwardOutput {
            features: g.value(fwd.features).clone(),
            logits: g.value(fwd.logits).clone(),
            probs: g.value(fwd.probs).clone(),
        })
    }

    /// Borrow a parameter's storage mutably by id.
    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id {
            ParamId::Weight(i) => self.layers[i].w.data_mut(),
            ParamId::Bias(i) => self.layers[i].b.data_mut(),
            ParamId::Gamma(i) => self.layers[i].gamma.data_mut(),
            ParamId::Beta(i) => self.layers[i].beta.data_mut(),
            ParamId::HeadWeight => self.head.w.data_mut(),
            ParamId::HeadBias => self.head.b.data_mut(),
        }
    }
}

fn transpose(w: &Tensor) -> Tensor {
    let (r, c) = (w.rows(), w.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = w.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}

/// Gradient of a trainable leaf in the model's stored layout. Weight leaves
/// live transposed on the graph, so their gradients come back [in, out] and
/// are transposed here.
pub(crate) fn grad_in_model_layout(g: &Graph, id: ParamId, var: Var) -> Vec<f64> {
    let grad = match g.grad(var) {
        Some(t) => t.clone(),
        None => Tensor::zeros(g.value(var).shape().to_vec()),
    };
    match id {
        ParamId::Weight(_) | ParamId::HeadWeight => transpose(&grad).data().to_vec(),
        _ => grad.data().to_vec(),
    }
}

/// Dense forward output.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Handles produced by [`ModelState::forward_on_graph`].
#[derive(Debug)]
pub struct GraphForward {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    pub trainable: Vec<(ParamId, Var)>,
    pub bn_nodes: Vec<Var>,
}

/// Pretraining hyperparameters. `max_epochs = 0` returns the initialized
/// model untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub target_loss: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            max_epochs: 100,
            target_loss: 1e-2,
            batch_size: 128,
            lr: 1e-3,
            bn_momentum: 0.1,
            train_per_class: 512,
            test_per_class: 128,
        }
    }
}

/// Final state reported by [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainStats {
    pub epochs_run: usize,
    pub final_loss: f64,
}

/// Train a fresh model on labeled source data with Adam + cross-entropy,
/// updating BN running statistics by exponential moving average. Stops when
/// the epoch's mean training loss falls below `cfg.target_loss`.
pub fn pretrain(
    data: &SourceData,
    classes: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ModelState, PretrainStats)> {
    let d = data.x.cols();
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(classes);
    let mut model = ModelState::init(&dims, seed)?;
    if cfg.max_epochs == 0 {
        return Ok((
            model,
            PretrainStats {
                epochs_run: 0,
                final_loss: f64::NAN,
            },
        ));
    }

    let n = data.x.rows();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let sizes: Vec<usize> = param_order_all(&model)
        .iter()
        .map(|id| param_len(&model, *id))
        .collect();
    let mut opt = OptimizerState::new(&sizes);

    let mut epochs_run = 0;
    let mut epoch_loss = f64::INFINITY;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(seed, "pretrain-shuffle", &[epoch as u64]);
        // Fisher-Yates with the seeded stream.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = data.x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let loss = train_step(&mut model, &xb, &yb, classes, cfg, &adam, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss;
            batches += 1;
        }
        epoch_loss = loss_sum / batches.max(1) as f64;
        epochs_run = epoch + 1;
        if epoch_loss < cfg.target_loss {
            break;
        }
    }

    Ok((
        model,
        PretrainStats {
            epochs_run,
            final_loss: epoch_loss,
        },
    ))
}

fn param_order_all(model: &ModelState) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for li in 0..model.layers.len() {
        ids.push(ParamId::Weight(li));
        ids.push(ParamId::Bias(li));
        ids.push(ParamId::Gamma(li));
        ids.push(ParamId::Beta(li));
    }
    ids.push(ParamId::HeadWeight);
    ids.push(ParamId::HeadBias);
    ids
}

fn param_len(model: &ModelState, id: ParamId) -> usize {
    match id {
        ParamId::Weight(i) => model.layers[i].w.numel(),
        ParamId::Bias(i) => model.layers[i].b.numel(),
        ParamId::Gamma(i) => model.layers[i].gamma.numel(),
        ParamId::Beta(i) => model.layers[i].beta.numel(),
        ParamId::HeadWeight => model.head.w.numel(),
        ParamId::HeadBias => model.head.b.numel(),
    }
}

fn train_step(
    model: &mut ModelState,
    xb: &Tensor,
    yb: &[usize],
    classes: usize,
    cfg: &PretrainConfig,
    adam: &AdamConfig,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let m = xb.rows();
    let mut g = Graph::new();
    let xv = g.constant(xb.clone());
    let fwd = model.forward_on_graph(&mut g, xv, StatsMode::Batch, ParamScope::All)?;

    // Cross-entropy: -(1/m) sum over rows of log p[y].
    let mut onehot = vec![0.0; m * classes];
    for (i, &y) in yb.iter().enumerate() {
        onehot[i * classes + y] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![m, classes], onehot)?);
    let lp = g.log(fwd.probs)?;
    let picked = g.elementwise_mul(lp, mask)?;
    let total = g.sum(picked)?;
    let loss = g.mul_scalar(total, -1.0 / m as f64)?;
    let loss_val = g.value(loss).data()[0];

    g.backward(loss)?;

    // Update running statistics from the batch statistics saved by each BN
    // node (unbiased variance for the running estimate).
    let mom = cfg.bn_momentum;
    let unbias = m as f64 / (m as f64 - 1.0);
    for (li, &node) in fwd.bn_nodes.iter().enumerate() {
        let (mean, var) = g.batch_stats(node).expect("batch stats on bn node");
        let layer = &mut model.layers[li];
        for j in 0..layer.running_mean.len() {
            layer.running_mean[j] = (1.0 - mom) * layer.running_mean[j] + mom * mean[j];
            layer.running_var[j] = (1.0 - mom) * layer.running_var[j] + mom * var[j] * unbias;
        }
    }

    let ids: Vec<ParamId> = fwd.trainable.iter().map(|(id, _)| *id).collect();
    let grads: Vec<Vec<f64>> = fwd
        .trainable
        .iter()
        .map(|&(id, var)| grad_in_model_layout(&g, id, var))
        .collect();
    apply_update(model, &ids, &grads, adam, opt);
    Ok(loss_val)
}

pub(crate) fn apply_update(
    model: &mut ModelState,
    ids: &[ParamId],
    grads: &[Vec<f64>],
    adam: &AdamConfig,
    opt: &mut OptimizerState,
) {
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    // Split borrows: collect raw pointers per id, then rebuild mutable slices.
    // Ids are distinct by construction.
    let mut params: Vec<&mut [f64]> = Vec::with_capacity(ids.len());
    let model_ptr = model as *mut ModelState;
    for &id in ids {
        // SAFETY: each ParamId addresses a distinct field, so the mutable
        // borrows do not alias.
        let slice = unsafe { (*model_ptr).param_mut(id) };
        params.push(slice);
    }
    opt.step(adam, &mut params, &grad_refs);
}

/// Top-1 accuracy of `model` on labeled data under the given stats mode.
pub fn accuracy(model: &ModelState, x: &Tensor, y: &[usize], stats: StatsMode) -> Result<f64> {
    let out = model.forward(x, stats)?;
    let c = out.logits.cols();
    let mut correct = 0usize;
    for (i, &label) in y.iter().enumerate() {
        let row = out.logits.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / y.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    w: Vec<f64>,
    b: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHead {
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    dims: Vec<usize>,
    layers: Vec<CheckpointLayer>,
    head: CheckpointHead,
    seed: u64,
}

const CHECKPOINT_VERSION: u32 = 1;

/// serde_json formatter printing every float with 17 significant digits,
/// which round-trips any f64 exactly.
struct SigFig17;

impl serde_json::ser::Formatter for SigFig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{:.16e}", value)
    }
}

/// Serialize a model (plus the seed that trained it) to checkpoint JSON.
pub fn checkpoint_to_string(model: &ModelState, seed: u64) -> Result<String> {
    for layer in &model.layers {
        if !(layer.gamma.all_finite() && layer.beta.all_finite() && layer.w.all_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        if layer.running_var.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::NonFinite("running variance".into()));
        }
    }
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        dims: model.dims.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                w: l.w.data().to_vec(),
                b: l.b.data().to_vec(),
                gamma: l.gamma.data().to_vec(),
                beta: l.beta.data().to_vec(),
                running_mean: l.running_mean.clone(),
                running_var: l.running_var.clone(),
            })
            .collect(),
        head: CheckpointHead {
            w: model.head.w.data().to_vec(),
            b: model.head.b.data().to_vec(),
        },
        seed,
    };
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFig17);
    file.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn save_checkpoint(model: &ModelState, seed: u64, path: &Path) -> Result<()> {
    let s = checkpoint_to_string(model, seed)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

/// Load a checkpoint; returns the model and the pretraining seed recorded
/// in it.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, u64)> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}

pub fn checkpoint_from_str(text: &str) -> Result<(ModelState, u64)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    let dims = file.dims;
    if dims.len() < 3 || file.layers.len() != dims.len() - 2 {
        return Err(Error::BadCheckpoint(format!(
            "dims {:?} inconsistent with {} layers",
            dims,
            file.layers.len()
        )));
    }
    let mut layers = Vec::new();
    for (li, l) in file.layers.into_iter().enumerate() {
        let (fan_in, fan_out) = (dims[li], dims[li + 1]);
        let check = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                Err(Error::BadCheckpoint(format!(
                    "layer {li} {name}: expected {want} values, got {got}"
                )))
            } else {
                Ok(())
            }
        };
        check("w", l.w.len(), fan_out * fan_in)?;
        check("b", l.b.len(), fan_out)?;
        check("gamma", l.gamma.len(), fan_out)?;
        check("beta", l.beta.len(), fan_out)?;
        check("running_mean", l.running_mean.len(), fan_out)?;
        check("running_var", l.running_var.len(), fan_out)?;
        layers.push(LayerParams {
            w: Tensor::new(vec![fan_out, fan_in], l.w)?,
            b: Tensor::new(vec![fan_out], l.b)?,
            gamma: Tensor::new(vec![fan_out], l.gamma)?,
            beta: Tensor::new(vec![fan_out], l.beta)?,
            running_mean: l.running_mean,
            running_var: l.running_var,
        });
    }
    let feat = dims[dims.len() - 2];
    let classes = dims[dims.len() - 1];
    if file.head.w.len() != classes * feat || file.head.b.len() != classes {
        return Err(Error::BadCheckpoint("head shape mismatch".into()));
    }
    Ok((
        ModelState {
            dims: dims.clone(),
            layers,
            head: HeadParams {
                w: Tensor::new(vec![classes, feat], file.head.w)?,
                b: Tensor::new(vec![classes], file.head.b)?,
            },
        },
        file.seed,
    ))
}
