//! Losses, optimizer, schedule and the training loop.

mod ablate;
mod metrics;

pub use ablate::{ablate, write_ablation_csv, AblationRow, ABLATION_SETTINGS};
pub use metrics::{
    compute_metrics, evaluate, predict, write_metrics_csv, ClassMetrics, InferenceMode, MetricsReport,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{detrend, DataError, Dataset, EcgRecord, Labels, DEFAULT_SAMPLE_RATE_HZ, N_CLASSES, N_LEADS};
use crate::model::{
    bind_params, forward_train_graph, image_input, signal_input, ModelConfig, ModelError, ModelState, TrainOutputs,
};
use crate::raster::{render_record, EcgImage, LayoutSpec, RasterError};
use crate::tensor::gradcheck::{gradcheck, op_suite, GradcheckReport};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptySplit,
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Stop the distillation term from pushing the signal stream towards the image stream.
    pub kd_teacher_detach: bool,
    pub enable_cmam: bool,
    pub enable_smam: bool,
    pub threshold: f64,
    /// Probabilities are clamped to `[eps, 1 - eps]` before every logarithm.
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-6,
            batch_size: 16,
            epochs: 30,
            lambda1: 1.0,
            lambda2: 1.0,
            seed: 0,
            kd_teacher_detach: false,
            enable_cmam: true,
            enable_smam: true,
            threshold: 0.5,
            eps: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("loss weights must be non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad(format!("eps {} outside (0, 0.5)", self.eps));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ losses

/// `-sum_c [t_c ln p_c + (1 - t_c) ln(1 - p_c)]` with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_multilabel(g: &mut Graph, targets: Labels, p: Var, eps: f64) -> Result<Var> {
    let t = g.constant(&[N_CLASSES], targets.as_f64().to_vec())?;
    let not_t = g.constant(&[N_CLASSES], targets.as_f64().map(|v| 1.0 - v).to_vec())?;
    let pc = g.clamp(p, eps, 1.0 - eps);
    let ln_p = g.ln(pc);
    let q = g.affine(pc, -1.0, 1.0);
    let ln_q = g.ln(q);
    let pos = g.mul(t, ln_p)?;
    let neg = g.mul(not_t, ln_q)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0))
}

/// `sum_c KL(Bernoulli(p_s,c) || Bernoulli(p_i,c))`, both clamped to `[eps, 1 - eps]`.
/// With `teacher_detach` the signal probabilities are treated as constants.
pub fn kd_kl(g: &mut Graph, p_s: Var, p_i: Var, eps: f64, teacher_detach: bool) -> Result<Var> {
    let p_s = if teacher_detach { g.detach(p_s) } else { p_s };
    let s = g.clamp(p_s, eps, 1.0 - eps);
    let i = g.clamp(p_i, eps, 1.0 - eps);
    let s_neg = g.affine(s, -1.0, 1.0);
    let i_neg = g.affine(i, -1.0, 1.0);
    let mut terms = Vec::with_capacity(2);
    for (a, b) in [(s, i), (s_neg, i_neg)] {
        let ln_a = g.ln(a);
        let ln_b = g.ln(b);
        let ratio = g.sub(ln_a, ln_b)?;
        terms.push(g.mul(a, ratio)?);
    }
    let both = g.add(terms[0], terms[1])?;
    Ok(g.sum(both))
}

pub fn total_loss(g: &mut Graph, cls: Var, kd: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    let a = g.scale(cls, lambda1);
    let b = g.scale(kd, lambda2);
    Ok(g.add(a, b)?)
}

/// Per-record losses recorded on one graph.
#[derive(Debug, Clone, Copy)]
pub struct RecordLoss {
    pub cls: Var,
    pub kd: Var,
    pub total: Var,
}

pub fn record_loss(g: &mut Graph, out: &TrainOutputs, labels: Labels, cfg: &TrainConfig) -> Result<RecordLoss> {
    let cls_s = bce_multilabel(g, labels, out.p_signal, cfg.eps)?;
    let cls_i = bce_multilabel(g, labels, out.p_image, cfg.eps)?;
    let cls = g.add(cls_s, cls_i)?;
    let kd = kd_kl(g, out.p_signal, out.p_image, cfg.eps, cfg.kd_teacher_detach)?;
    let total = total_loss(g, cls, kd, cfg.lambda1, cfg.lambda2)?;
    Ok(RecordLoss { cls, kd, total })
}

/// Finite-difference check of the total training loss of one record against every parameter.
pub fn loss_gradcheck(
    state: &ModelState,
    record: &EcgRecord,
    image: &EcgImage,
    cfg: &TrainConfig,
    step: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let inputs: Vec<Tensor> = state.params.iter().map(|t| t.clone().requiring_grad()).collect();
    let f = |g: &mut Graph, p: &[Var]| -> std::result::Result<Var, TensorError> {
        let run = |g: &mut Graph| -> Result<Var> {
            let s = signal_input(g, record)?;
            let i = image_input(g, image)?;
            let out = forward_train_graph(g, state, p, s, i)?;
            Ok(record_loss(g, &out, record.labels, cfg)?.total)
        };
        run(g).map_err(|e| match e {
            TrainError::Model(ModelError::Tensor(t)) => t,
            other => TensorError::Contract(other.to_string()),
        })
    };
    Ok(gradcheck(f, &inputs, step, tol)?)
}

/// One line of [`gradcheck_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckLine {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Central-difference step for single ops and for the whole tiny model. The model's loss
/// sums many terms, so a smaller step there would be dominated by rounding.
pub const OP_STEP: f64 = 1e-6;
pub const MODEL_STEP: f64 = 1e-5;

/// Every tensor op, then the full training loss of the tiny model, once per seed.
pub fn gradcheck_suite(seeds: &[u64], op_tol: f64, model_tol: f64) -> Result<Vec<GradcheckLine>> {
    let mut lines = Vec::new();
    for &seed in seeds {
        for case in op_suite(seed) {
            let r = gradcheck(&case.op, &case.inputs, OP_STEP, op_tol)?;
            lines.push(GradcheckLine {
                name: case.name.to_string(),
                seed,
                max_rel_error: r.max_rel_error(),
                passed: r.passed(),
            });
        }
    }
    for &seed in seeds {
        let r = tiny_model_gradcheck(seed, model_tol)?;
        lines.push(GradcheckLine {
            name: "tiny_model_loss".into(),
            seed,
            max_rel_error: r.max_rel_error(),
            passed: r.passed(),
        });
    }
    Ok(lines)
}

/// Tiny model with random weights, a random 12-lead record and a random raster.
pub fn tiny_model_gradcheck(seed: u64, tol: f64) -> Result<GradcheckReport> {
    let config = ModelConfig::tiny();
    let state = ModelState::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let t = config.signal_length;
    let samples = (0..N_LEADS * t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = Labels::from_mask(rng.random_range(0..64));
    let record = EcgRecord::new(samples, t, labels, DEFAULT_SAMPLE_RATE_HZ)?;
    let pixels = (0..config.image_height * config.image_width).map(|_| rng.random()).collect();
    let image = EcgImage::new(config.image_height, config.image_width, pixels)?;
    loss_gradcheck(&state, &record, &image, &TrainConfig::default(), MODEL_STEP, tol)
}

// --------------------------------------------------------------- optimizer

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Bias-corrected Adam update from each parameter's stored gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(TrainError::Contract(format!(
            "optimizer tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(TrainError::Contract(format!("parameter {i} has no gradient")));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, (w, gr)) in p.data_mut().iter_mut().zip(grad).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gr;
            v[j] = b2 * v[j] + (1.0 - b2) * gr * gr;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(TrainError::Contract(format!("step {step} outside [0, {total_steps}]")));
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

// ----------------------------------------------------------------- samples

/// A detrended record with its rendered raster, quantized to 8 bits as in a PGM file.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: EcgRecord,
    pub labels: Labels,
    height: usize,
    width: usize,
    image: Vec<u8>,
}

impl Sample {
    pub fn new(record: &EcgRecord, layout: &LayoutSpec, height: usize, width: usize) -> Result<Self> {
        let record = detrend(record);
        let image = render_record(&record, layout, height, width)?.to_bytes();
        Ok(Self {
            labels: record.labels,
            record,
            height,
            width,
            image,
        })
    }

    pub fn image(&self) -> EcgImage {
        EcgImage::from_bytes(self.height, self.width, &self.image).expect("sample holds a full raster")
    }
}

pub fn prepare_samples(ds: &Dataset, indices: &[usize], layout: &LayoutSpec, height: usize, width: usize) -> Result<Vec<Sample>> {
    indices
        .iter()
        .map(|&i| Sample::new(&ds.records[i], layout, height, width))
        .collect()
}

// -------------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    /// Unweighted divergence, measured even when its weight is zero.
    pub kd: f64,
    /// `lambda2 * kd`, the distillation contribution to `total`.
    pub kd_term: f64,
    pub total: f64,
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub kd: f64,
    pub kd_term: f64,
    pub total: f64,
    pub val_kd: Option<f64>,
    pub val_f1_signal: Option<f64>,
    pub val_f1_image: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }
}

/// Validation summary: mean distillation divergence and macro F1 of both inference modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub kd: f64,
    pub signal: MetricsReport,
    pub image: MetricsReport,
}

pub fn validate(state: &ModelState, samples: &[Sample], cfg: &TrainConfig) -> Result<Validation> {
    let mut kd_sum = 0.0;
    let mut p_signal = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph::new();
        let p = bind_params(&mut g, state);
        let sig = signal_input(&mut g, &s.record)?;
        let img = image_input(&mut g, &s.image())?;
        let out = forward_train_graph(&mut g, state, &p, sig, img)?;
        let kd = kd_kl(&mut g, out.p_signal, out.p_image, cfg.eps, false)?;
        kd_sum += g.value(kd)[0];
        p_signal.push(g.value(out.p_signal).try_into().expect("six classes"));
    }
    let labels: Vec<Labels> = samples.iter().map(|s| s.labels).collect();
    let p_image = predict(state, samples, InferenceMode::Image)?;
    Ok(Validation {
        kd: kd_sum / samples.len().max(1) as f64,
        signal: compute_metrics(&p_signal, &labels, cfg.threshold)?,
        image: compute_metrics(&p_image, &labels, cfg.threshold)?,
    })
}

/// Weight of each batch in the running mean of the image-side cross attention.
pub const ATTENTION_MOMENTUM: f64 = 0.1;

/// Trains `state` in place. The CMAM/SMAM switches of `cfg` are written into the model
/// config so checkpoints and inference see the same architecture. `on_epoch` receives
/// each log line as it is produced.
pub fn fit(
    state: &mut ModelState,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    state.config.cmam = cfg.enable_cmam;
    state.config.smam = cfg.enable_smam;
    let batches = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&state.params);
    let mut log = TrainLog::default();
    let val_fields = |state: &ModelState| -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None, None));
        }
        let v = validate(state, val, cfg)?;
        Ok((Some(v.kd), Some(v.signal.macro_f1), Some(v.image.macro_f1)))
    };
    let (val_kd, val_f1_signal, val_f1_image) = val_fields(state)?;
    let init = EpochRecord {
        epoch: 0,
        step: 0,
        lr: cfg.lr_max,
        cls: f64::NAN,
        kd: f64::NAN,
        kd_term: f64::NAN,
        total: f64::NAN,
        val_kd,
        val_f1_signal,
        val_f1_image,
    };
    on_epoch(&init);
    log.epochs.push(init);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut grads: Vec<Vec<f64>> = state.params.iter().map(|p| vec![0.0; p.numel()]).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut cls_sum, mut kd_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut last_lr = cfg.lr_max;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)?;
            last_lr = lr;
            step += 1;
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let inv = 1.0 / batch.len() as f64;
            let (mut cls, mut kd, mut total) = (0.0, 0.0, 0.0);
            let mut batch_attention = vec![0.0; state.image_attention_mean.numel()];
            for &i in batch {
                let s = &train[i];
                let mut g = Graph::new();
                let p = bind_params(&mut g, state);
                let sig = signal_input(&mut g, &s.record)?;
                let img = image_input(&mut g, &s.image())?;
                let out = forward_train_graph(&mut g, state, &p, sig, img)?;
                let loss = record_loss(&mut g, &out, s.labels, cfg)?;
                let value = g.value(loss.total)[0];
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "loss".into(),
                        epoch,
                        step,
                    });
                }
                if let Some(a) = out.image_cross_attention {
                    batch_attention.iter_mut().zip(g.value(a)).for_each(|(m, v)| *m += v * inv);
                }
                cls += g.value(loss.cls)[0] * inv;
                kd += g.value(loss.kd)[0] * inv;
                total += value * inv;
                let scaled = g.scale(loss.total, inv);
                g.backward(scaled)?;
                for (acc, &v) in grads.iter_mut().zip(&p) {
                    if let Some(gr) = g.grad(v) {
                        acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "gradient".into(),
                    epoch,
                    step,
                });
            }
            for (param, gr) in state.params.iter_mut().zip(&grads) {
                param.set_grad(gr.clone())?;
            }
            adam_step(&mut state.params, &mut adam, lr)?;
            if state.config.cmam {
                let mean = state.image_attention_mean.data_mut();
                mean.iter_mut()
                    .zip(&batch_attention)
                    .for_each(|(m, b)| *m += ATTENTION_MOMENTUM * (b - *m));
            }
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                cls,
                kd,
                kd_term: cfg.lambda2 * kd,
                total,
            });
            let w = batch.len() as f64 / train.len() as f64;
            cls_sum += cls * w;
            kd_sum += kd * w;
            total_sum += total * w;
        }
        let (val_kd, val_f1_signal, val_f1_image) = val_fields(state)?;
        let rec = EpochRecord {
            epoch,
            step,
            lr: last_lr,
            cls: cls_sum,
            kd: kd_sum,
            kd_term: cfg.lambda2 * kd_sum,
            total: total_sum,
            val_kd,
            val_f1_signal,
            val_f1_image,
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    for p in &mut state.params {
        p.zero_grad();
    }
    Ok(log)
}
