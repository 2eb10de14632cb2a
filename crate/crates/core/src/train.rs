//! Training loop: cosine-annealed AdamW over the dual-head network,
//! per-epoch validation metrics, CSV epoch logs, and deterministic
//! checkpoint persistence that captures parameters, running statistics,
//! optimizer moments, and the random-number generator.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{Config, LossWeights};
use crate::data::{apply_strategy, Dataset, LabelMatrix, Strategy};
use crate::error::{Error, Result};
use crate::layers::{apply_buffer_updates, Mode, Model, ParamStore};
use crate::losses::{
    dirichlet_loss, evidence_to_alpha, masked_bce, offset_loss, orthogonality_loss, total_loss,
    LossParts,
};
use crate::metrics::{compute_report, MetricsReport};
use crate::rng::Rng;
use crate::tensor::tape::{stable_sigmoid, stable_softplus, Tape};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine-annealed learning rate by epoch index. The endpoints are exact:
/// epoch 0 sees `base_lr`, epochs at or beyond `t_max` see zero.
pub fn lr_at(epoch: usize, base_lr: f64, t_max: usize) -> f64 {
    if epoch == 0 {
        return base_lr;
    }
    if t_max == 0 || epoch >= t_max {
        return 0.0;
    }
    let frac = epoch as f64 / t_max as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One AdamW update on a single tensor, in place. `step` is the 1-based
/// update count the bias correction uses. Weight decay is decoupled: the
/// parameter shrinks by `lr * weight_decay` of itself regardless of the
/// adaptive step.
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    weight_decay: f64,
) {
    assert!(step >= 1, "adamw_update: step count is 1-based");
    assert_eq!(param.shape(), grad.shape(), "adamw_update: shape mismatch");
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let p = param.data_mut();
    let g = grad.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..p.len() {
        md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g[i];
        vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        p[i] = p[i] * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// AdamW state: first and second gradient moments per parameter, indexed
/// by [`crate::layers::ParamId::index`], plus the shared step counter.
pub struct Optimizer {
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Optimizer {
        let m: Vec<Tensor> = store
            .param_ids()
            .map(|id| Tensor::zeros(store.param(id).shape().to_vec()))
            .collect();
        let v = m.clone();
        Optimizer {
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// Rebuilds optimizer state from checkpointed pieces.
    pub fn from_parts(step: u64, m: Vec<Tensor>, v: Vec<Tensor>, weight_decay: f64) -> Optimizer {
        assert_eq!(m.len(), v.len(), "moment vectors must pair up");
        Optimizer {
            weight_decay,
            step,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update across the whole store. `grads` is indexed by
    /// parameter index; a non-finite gradient entry aborts the step and
    /// names the offending parameter.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        assert_eq!(
            grads.len(),
            store.param_count(),
            "apply: expected one gradient per parameter"
        );
        let ids: Vec<_> = store.param_ids().collect();
        for &id in &ids {
            let g = &grads[id.index()];
            if let Some(&bad) = g.data().iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    part: format!("gradient of `{}`", store.param_name(id)),
                    value: bad,
                });
            }
        }
        self.step += 1;
        for &id in &ids {
            let i = id.index();
            adamw_update(
                store.param_mut(id),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                lr,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`
/// and returns the pre-clip norm. `max_norm` of zero (or below) disables
/// clipping while still reporting the norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Loss breakdown and gradient norm for one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub total: f64,
    pub bce: f64,
    pub dirichlet: f64,
    /// Unnormalized Dirichlet term sum, for logging alongside the
    /// count-normalized value that enters the objective.
    pub dirichlet_raw: f64,
    pub offset: f64,
    pub orth: f64,
    /// Global gradient norm before any clipping.
    pub grad_norm: f64,
    /// True when the batch had no definite label anywhere.
    pub bce_empty_mask: bool,
}

/// One optimization step on a batch: forward in train mode, the four-part
/// objective, backward, optional clipping, AdamW, and the batch-norm
/// running-statistics fold-in.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    images: &Tensor,
    labels: &LabelMatrix,
    weights: &LossWeights,
    lr: f64,
    clip_norm: f64,
) -> Result<StepReport> {
    assert!(labels.n() > 0, "train_step needs a non-empty batch");
    let tape = Tape::new();
    let pass = model.forward(&tape, store, images, Mode::Train);
    let bce = masked_bce(pass.logits, labels);
    let dout = evidence_to_alpha(pass.evidence_raw);
    let dir = dirichlet_loss(&dout, labels, weights.lambda_unc);
    let offset = offset_loss(pass.offsets, weights.huber_delta);
    let orth = orthogonality_loss(pass.block_features);
    let parts = LossParts {
        bce: bce.loss,
        dirichlet: dir.loss,
        offset,
        orth,
    };
    let total = total_loss(&parts, weights)?;
    let mut report = StepReport {
        total: total.item(),
        bce: parts.bce.item(),
        dirichlet: parts.dirichlet.item(),
        dirichlet_raw: dir.raw,
        offset: parts.offset.item(),
        orth: parts.orth.item(),
        grad_norm: 0.0,
        bce_empty_mask: bce.empty_mask,
    };
    tape.backward(total)?;
    let mut grads: Vec<Tensor> = store
        .param_ids()
        .map(|id| Tensor::zeros(store.param(id).shape().to_vec()))
        .collect();
    for (id, var) in &pass.bound {
        if let Some(g) = var.grad() {
            grads[id.index()] = g;
        }
    }
    report.grad_norm = clip_gradients(&mut grads, clip_norm);
    opt.apply(store, &grads, lr)?;
    apply_buffer_updates(store, pass.buffer_updates);
    Ok(report)
}

/// Copies the listed sample rows of a `[B, ...]` tensor into a new tensor.
pub fn take_image_rows(images: &Tensor, indices: &[usize]) -> Tensor {
    let shape = images.shape();
    assert!(!shape.is_empty(), "take_image_rows needs a batch axis");
    let volume: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * volume);
    for &i in indices {
        data.extend_from_slice(&images.data()[i * volume..(i + 1) * volume]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = indices.len();
    Tensor::new(out_shape, data)
}

/// Eval-mode head readings for a whole split: logits, sigmoid
/// probabilities, and evidential uncertainty, each `[N, C]`.
pub struct EvalOutput {
    pub logits: Tensor,
    pub probs: Tensor,
    pub u: Tensor,
}

pub const EVAL_CHUNK: usize = 32;

/// Worker count for evaluation, from `ADURA_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("ADURA_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn evaluate(model: &Model, store: &ParamStore, images: &Tensor) -> EvalOutput {
    evaluate_with_threads(model, store, images, eval_threads())
}

/// Runs the network in eval mode over `images`, chunk by chunk, fanning
/// chunks out over up to `threads` workers. Results are bitwise identical
/// for any thread count because eval-mode samples never interact.
pub fn evaluate_with_threads(
    model: &Model,
    store: &ParamStore,
    images: &Tensor,
    threads: usize,
) -> EvalOutput {
    let shape = images.shape().to_vec();
    assert_eq!(shape.len(), 4, "evaluate expects [B, C, H, W] images");
    let n = shape[0];
    assert!(n > 0, "evaluate needs at least one sample");
    let c = model.config.num_classes;
    let volume: usize = shape[1..].iter().product();

    let run_chunk = |start: usize, end: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let sub = Tensor::new(
            vec![end - start, shape[1], shape[2], shape[3]],
            images.data()[start * volume..end * volume].to_vec(),
        );
        let tape = Tape::new();
        let pass = model.forward(&tape, store, &sub, Mode::Eval);
        let lv = pass.logits.value();
        let ev = pass.evidence_raw.value();
        let entries = (end - start) * c;
        let mut logits = Vec::with_capacity(entries);
        let mut probs = Vec::with_capacity(entries);
        let mut u = Vec::with_capacity(entries);
        for i in 0..entries {
            let z = lv.data()[i];
            logits.push(z);
            probs.push(stable_sigmoid(z));
            let strength =
                stable_softplus(ev.data()[2 * i]) + stable_softplus(ev.data()[2 * i + 1]) + 2.0;
            u.push(2.0 / strength);
        }
        (logits, probs, u)
    };

    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(n)))
        .collect();
    let mut logits = vec![0.0; n * c];
    let mut probs = vec![0.0; n * c];
    let mut u = vec![0.0; n * c];
    if threads <= 1 || chunks.len() <= 1 {
        for &(s, e) in &chunks {
            let (lo, pr, uu) = run_chunk(s, e);
            logits[s * c..e * c].copy_from_slice(&lo);
            probs[s * c..e * c].copy_from_slice(&pr);
            u[s * c..e * c].copy_from_slice(&uu);
        }
    } else {
        let workers = threads.min(chunks.len());
        let gathered: Vec<(usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> =
            std::thread::scope(|scope| {
                let mut handles = Vec::with_capacity(workers);
                for w in 0..workers {
                    let mine: Vec<(usize, usize)> =
                        chunks.iter().copied().skip(w).step_by(workers).collect();
                    let run = &run_chunk;
                    handles.push(scope.spawn(move || {
                        mine.into_iter()
                            .map(|(s, e)| {
                                let (lo, pr, uu) = run(s, e);
                                (s, e, lo, pr, uu)
                            })
                            .collect::<Vec<_>>()
                    }));
                }
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("evaluation worker panicked"))
                    .collect()
            });
        for (s, e, lo, pr, uu) in gathered {
            logits[s * c..e * c].copy_from_slice(&lo);
            probs[s * c..e * c].copy_from_slice(&pr);
            u[s * c..e * c].copy_from_slice(&uu);
        }
    }
    EvalOutput {
        logits: Tensor::new(vec![n, c], logits),
        probs: Tensor::new(vec![n, c], probs),
        u: Tensor::new(vec![n, c], u),
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADUR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to restart training mid-trajectory: parameters and
/// running statistics by name, optimizer moments, the RNG state, the
/// epoch counter, the best validation metric so far, and the full
/// resolved config as text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub opt_step: u64,
    pub opt_m: Vec<(String, Tensor)>,
    pub opt_v: Vec<(String, Tensor)>,
    pub rng_state: [u64; 4],
    pub epoch: u64,
    pub best_metric: Option<f64>,
    pub config_text: String,
}

fn push_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_entries(out: &mut Vec<u8>, entries: &[(String, Tensor)]) {
    push_u32(out, entries.len() as u32);
    for (name, t) in entries {
        push_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(out, t.rank() as u32);
        for &d in t.shape() {
            push_u64(out, d as u64);
        }
        for &x in t.data() {
            push_f64(out, x);
        }
    }
}

/// Serializes a checkpoint: magic `ADUR`, version, little-endian
/// throughout; named-tensor sections for parameters, buffers, and both
/// optimizer moments; then RNG words, epoch, best metric (NaN encodes
/// absent), and the config echo.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_entries(&mut out, &ckpt.params);
    push_entries(&mut out, &ckpt.buffers);
    push_u64(&mut out, ckpt.opt_step);
    push_entries(&mut out, &ckpt.opt_m);
    push_entries(&mut out, &ckpt.opt_v);
    for &w in &ckpt.rng_state {
        push_u64(&mut out, w);
    }
    push_u64(&mut out, ckpt.epoch);
    push_f64(&mut out, ckpt.best_metric.unwrap_or(f64::NAN));
    push_u32(&mut out, ckpt.config_text.len() as u32);
    out.extend_from_slice(ckpt.config_text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(Error::CorruptCheckpoint(format!(
                "unexpected end of file at byte {}",
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("name is not valid UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!(
                "implausible tensor rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let volume = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint("tensor volume overflows".into()))?;
        let raw = self.take(
            volume
                .checked_mul(8)
                .ok_or_else(|| Error::CorruptCheckpoint("tensor volume overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(dims, data))
    }

    fn entries(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string()?;
            let tensor = self.tensor()?;
            out.push((name, tensor));
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let params = r.entries()?;
    let buffers = r.entries()?;
    let opt_step = r.u64()?;
    let opt_m = r.entries()?;
    let opt_v = r.entries()?;
    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let epoch = r.u64()?;
    let best = r.f64()?;
    let config_text = r.string()?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after the checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        buffers,
        opt_step,
        opt_m,
        opt_v,
        rng_state,
        epoch,
        best_metric: if best.is_nan() { None } else { Some(best) },
        config_text,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// One epoch's log line: mean training losses plus validation metrics.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_dir: f64,
    pub loss_offset: f64,
    pub loss_orth: f64,
    pub micro_auc: Option<f64>,
    pub selective_acc: Option<f64>,
    pub unc_recall: Option<f64>,
    pub coverage: f64,
}

pub const LOG_COLUMNS: &str =
    "epoch,lr,loss_total,loss_bce,loss_dir,loss_offset,loss_orth,micro_auc,selective_acc,unc_recall,coverage";

fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn log_line(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.lr,
        r.loss_total,
        r.loss_bce,
        r.loss_dir,
        r.loss_offset,
        r.loss_orth,
        opt_cell(r.micro_auc),
        opt_cell(r.selective_acc),
        opt_cell(r.unc_recall),
        r.coverage,
    )
}

/// Derives the companion file path `<out>.<suffix>`.
pub fn sibling_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

/// What a finished `fit` call hands back: the per-epoch records it added,
/// the best validation micro-AUC seen so far, and the last epoch's full
/// metrics report.
pub struct FitSummary {
    pub records: Vec<EpochRecord>,
    pub best_metric: Option<f64>,
    pub last_report: Option<MetricsReport>,
}

/// Owns everything training mutates. Checkpoints restore this struct
/// exactly, so a resumed run continues the original trajectory bit for
/// bit.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: Optimizer,
    pub rng: Rng,
    pub config: Config,
    pub epoch: usize,
    pub best_metric: Option<f64>,
}

impl Trainer {
    /// Builds a fresh model and optimizer from a validated config, seeding
    /// everything from `config.train.seed`.
    pub fn new(config: Config) -> Result<Trainer> {
        config.validate()?;
        let mut rng = Rng::new(config.train.seed);
        let (model, store) = Model::build(&config.network, &mut rng)?;
        let opt = Optimizer::new(&store, config.train.weight_decay);
        Ok(Trainer {
            model,
            store,
            opt,
            rng,
            config,
            epoch: 0,
            best_metric: None,
        })
    }

    /// Restores the exact state a checkpoint captured. The network is
    /// rebuilt from the config echo, then every tensor is overwritten by
    /// name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let config = Config::from_text(&ckpt.config_text)?;
        config.validate()?;
        let mut scratch = Rng::new(config.train.seed);
        let (model, mut store) = Model::build(&config.network, &mut scratch)?;
        if ckpt.params.len() != store.param_count() {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint carries {} parameter tensors, the configured network has {}",
                ckpt.params.len(),
                store.param_count()
            )));
        }
        for (name, value) in &ckpt.params {
            store.assign_param(name, value.clone())?;
        }
        let buffer_count = store.buffers().count();
        if ckpt.buffers.len() != buffer_count {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint carries {} buffers, the configured network has {buffer_count}",
                ckpt.buffers.len()
            )));
        }
        for (name, value) in &ckpt.buffers {
            store.assign_buffer(name, value.clone())?;
        }
        let m = aligned_moments(&store, &ckpt.opt_m, "first")?;
        let v = aligned_moments(&store, &ckpt.opt_v, "second")?;
        let opt = Optimizer::from_parts(ckpt.opt_step, m, v, config.train.weight_decay);
        Ok(Trainer {
            model,
            store,
            opt,
            rng: Rng::from_state(ckpt.rng_state),
            config,
            epoch: ckpt.epoch as usize,
            best_metric: ckpt.best_metric,
        })
    }

    /// Snapshots the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .params()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let buffers = self
            .store
            .buffers()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let (m, v) = self.opt.moments();
        let named = |tensors: &[Tensor]| -> Vec<(String, Tensor)> {
            self.store
                .param_ids()
                .map(|id| {
                    (
                        self.store.param_name(id).to_string(),
                        tensors[id.index()].clone(),
                    )
                })
                .collect()
        };
        Checkpoint {
            params,
            buffers,
            opt_step: self.opt.step_count(),
            opt_m: named(m),
            opt_v: named(v),
            rng_state: self.rng.state(),
            epoch: self.epoch as u64,
            best_metric: self.best_metric,
            config_text: self.config.echo_text(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }

    /// Runs the configured number of epochs over `train`, validating on
    /// `val` after each. Training labels pass through the configured
    /// uncertain-label strategy; validation keeps its original labels.
    /// Writes the best-micro-AUC checkpoint to `out`, the newest state to
    /// `<out>.last`, and the epoch log to `<out>.log.csv`. A trainer
    /// resumed mid-run appends to an existing log instead of restarting
    /// it.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset, out: &Path) -> Result<FitSummary> {
        let classes = self.config.network.num_classes;
        for (split, labels) in [("training", &train.labels), ("validation", &val.labels)] {
            if labels.classes() != classes {
                return Err(Error::config(format!(
                    "{split} labels carry {} classes, the network is configured for {classes}",
                    labels.classes()
                )));
            }
        }
        let strategy = Strategy::from_name(&self.config.train.strategy)?;
        let train_labels = apply_strategy(&train.labels, strategy);
        let train_images = train.load_images()?;
        let val_images = val.load_images()?;

        let batch_size = self.config.train.batch_size;
        let total_epochs = self.config.train.epochs;
        let base_lr = self.config.train.base_lr;
        let t_max = self.config.train.t_max;
        let clip = self.config.train.clip_norm;
        let tau = self.config.train.tau;
        let weights = self.config.loss.clone();

        let last_path = sibling_path(out, "last");
        let log_path = sibling_path(out, "log.csv");
        let mut log_text = if self.epoch > 0 && log_path.exists() {
            fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
        } else {
            let mut header = String::new();
            for (key, value) in self.config.echo_pairs() {
                header.push_str(&format!("# {key}={value}\n"));
            }
            header.push_str(LOG_COLUMNS);
            header.push('\n');
            header
        };

        let n = train.n();
        let mut records = Vec::new();
        let mut last_report = None;
        let mut wrote_best = false;

        while self.epoch < total_epochs {
            let lr = lr_at(self.epoch, base_lr, t_max);
            let mut order: Vec<usize> = (0..n).collect();
            self.rng.shuffle(&mut order);
            let mut sums = [0.0; 5];
            let mut batches = 0usize;
            for batch in order.chunks(batch_size) {
                let images = take_image_rows(&train_images, batch);
                let labels = train_labels.take_rows(batch);
                let step = train_step(
                    &self.model,
                    &mut self.store,
                    &mut self.opt,
                    &images,
                    &labels,
                    &weights,
                    lr,
                    clip,
                )?;
                sums[0] += step.total;
                sums[1] += step.bce;
                sums[2] += step.dirichlet;
                sums[3] += step.offset;
                sums[4] += step.orth;
                batches += 1;
            }
            let inv = 1.0 / batches.max(1) as f64;
            let eval = evaluate(&self.model, &self.store, &val_images);
            let report = compute_report(&eval.probs, &eval.u, &val.labels, tau);
            self.epoch += 1;
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                loss_total: sums[0] * inv,
                loss_bce: sums[1] * inv,
                loss_dir: sums[2] * inv,
                loss_offset: sums[3] * inv,
                loss_orth: sums[4] * inv,
                micro_auc: report.micro_auc,
                selective_acc: report.selective_accuracy,
                unc_recall: report.uncertainty_recall,
                coverage: report.coverage,
            };
            if let Some(metric) = report.micro_auc {
                if self.best_metric.map_or(true, |b| metric > b) {
                    self.best_metric = Some(metric);
                    self.save(out)?;
                    wrote_best = true;
                }
            }
            self.save(&last_path)?;
            log_text.push_str(&log_line(&record));
            log_text.push('\n');
            fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
            records.push(record);
            last_report = Some(report);
        }

        if !wrote_best && !out.exists() {
            self.save(out)?;
        }
        if records.is_empty() && !log_path.exists() {
            fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(FitSummary {
            records,
            best_metric: self.best_metric,
            last_report,
        })
    }
}

fn aligned_moments(
    store: &ParamStore,
    entries: &[(String, Tensor)],
    which: &str,
) -> Result<Vec<Tensor>> {
    if entries.len() != store.param_count() {
        return Err(Error::CorruptCheckpoint(format!(
            "checkpoint carries {} {which}-moment tensors, the network has {} parameters",
            entries.len(),
            store.param_count()
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for id in store.param_ids() {
        let name = store.param_name(id);
        let (_, tensor) = entries.iter().find(|(n, _)| n == name).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("missing {which} moment for `{name}`"))
        })?;
        if tensor.shape() != store.param(id).shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "{which} moment for `{name}` has shape {:?}, parameter has {:?}",
                tensor.shape(),
                store.param(id).shape()
            )));
        }
        out.push(tensor.clone());
    }
    Ok(out)
}
