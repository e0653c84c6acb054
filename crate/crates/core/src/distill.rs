//! Self-distillation with an EMA teacher.
//!
//! The teacher sees the two global views, the student sees every view. The
//! objective is the mean cross-entropy between the centred, sharpened teacher
//! distribution of one global view and the student distribution of every
//! other view. Only the student receives gradients; the teacher follows it by
//! exponential moving average and the centre follows the teacher's batch-mean
//! logits.

use serde::{Deserialize, Serialize};

use crate::augment::ViewSet;
use crate::error::{bail, Error, Result};
use crate::io::{Container, CsvTable};
use crate::span_reg::{combine_span_loss, HeadAssignment, RegTarget, RegularizerConfig, ViewMaps};
use crate::tensor::Scalar;
use crate::vit::{Forward, ImageBatch, OutputGrads, ParameterSet, ViTConfig};

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 28,
            epochs: 30,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_t > 0.0) {
            bail!(Domain, "temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) || !(0.0..1.0).contains(&self.center_momentum) {
            bail!(Domain, "ema momentum must lie in [0, 1] and centre momentum in [0, 1)");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            bail!(Config, "invalid optimiser settings");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            bail!(Config, "batch size and epoch count must be positive");
        }
        Ok(())
    }
}

/// `softmax((logits - center) / tau)`.
pub fn sharpen(logits: &[f64], tau: f64, center: Option<&[f64]>) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        bail!(Domain, "temperature {tau} must be positive");
    }
    let mut z: Vec<f64> = match center {
        Some(c) => {
            if c.len() != logits.len() {
                bail!(Shape, "centre has {} entries, logits {}", c.len(), logits.len());
            }
            logits.iter().zip(c).map(|(l, c)| (l - c) / tau).collect()
        }
        None => logits.iter().map(|l| l / tau).collect(),
    };
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut z {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
    Ok(z)
}

/// `-sum p log q` with `q` clamped below at [`LOG_CLAMP`].
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(p, q)| p * q.max(LOG_CLAMP).ln()).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct DistillationPair<T> {
    pub student: ParameterSet<T>,
    pub teacher: ParameterSet<T>,
    pub tau_s: f64,
    pub tau_t: f64,
    pub center: Vec<T>,
    pub center_momentum: f64,
    pub ema_momentum: f64,
}

impl<T: Scalar> PartialEq for DistillationPair<T> {
    fn eq(&self, o: &Self) -> bool {
        self.student == o.student
            && self.teacher == o.teacher
            && self.center == o.center
            && (self.tau_s, self.tau_t, self.center_momentum, self.ema_momentum) == (o.tau_s, o.tau_t, o.center_momentum, o.ema_momentum)
    }
}

impl<T: Scalar> DistillationPair<T> {
    /// Teacher starts as a copy of the student; centre starts at zero.
    pub fn new(student: ParameterSet<T>, config: &DistillConfig) -> Result<Self> {
        config.validate()?;
        let out = student.config.head_out_dim;
        Ok(Self {
            teacher: student.clone(),
            student,
            tau_s: config.tau_s,
            tau_t: config.tau_t,
            center: vec![T::zero(); out],
            center_momentum: config.center_momentum,
            ema_momentum: config.ema_momentum,
        })
    }
}

/// `teacher <- m * teacher + (1 - m) * student`.
pub fn ema_update<T: Scalar>(teacher: &mut ParameterSet<T>, student: &ParameterSet<T>, m: f64) -> Result<()> {
    teacher.check_same_shape(student)?;
    let (m, k) = (T::c(m), T::c(1.0 - m));
    for (t, &s) in teacher.data.iter_mut().zip(&student.data) {
        *t = m * *t + k * s;
    }
    Ok(())
}

/// `c <- momentum * c + (1 - momentum) * mean(rows of logits)`.
pub fn center_update<T: Scalar>(center: &mut [T], teacher_logits: &[T], momentum: f64) -> Result<()> {
    let d = center.len();
    if d == 0 || teacher_logits.is_empty() || teacher_logits.len() % d != 0 {
        bail!(Shape, "centre update needs a non-empty batch of {d}-wide logits");
    }
    let rows = teacher_logits.len() / d;
    for (j, c) in center.iter_mut().enumerate() {
        let mut sum = 0.0;
        for r in 0..rows {
            sum += teacher_logits[r * d + j].f64();
        }
        *c = T::c(momentum * c.f64() + (1.0 - momentum) * sum / rows as f64);
    }
    Ok(())
}

/// Loss and student-logit gradients for one batch.
pub struct DinoTerms<T> {
    pub loss: f64,
    /// `[batch * 2, out]`, sample-major.
    pub grad_global: Vec<T>,
    /// `[batch * n_local, out]`, sample-major.
    pub grad_local: Vec<T>,
}

/// DINO objective from precomputed logits.
///
/// Rows are sample-major: global view `g` of sample `b` sits at row `2b + g`,
/// local view `l` at row `n_local * b + l`. Same-view pairs are skipped.
#[allow(clippy::too_many_arguments)]
pub fn dino_loss_from_logits<T: Scalar>(
    teacher_global: &[T],
    student_global: &[T],
    student_local: &[T],
    batch: usize,
    n_local: usize,
    out: usize,
    tau_s: f64,
    tau_t: f64,
    center: &[T],
) -> Result<DinoTerms<T>> {
    if teacher_global.len() != batch * 2 * out || student_global.len() != batch * 2 * out || student_local.len() != batch * n_local * out {
        bail!(Shape, "logit buffers do not match batch {batch} with 2 global and {n_local} local views");
    }
    if batch == 0 {
        bail!(Shape, "empty batch");
    }
    let center: Vec<f64> = center.iter().map(|c| c.f64()).collect();
    let row = |buf: &[T], r: usize| -> Vec<f64> { buf[r * out..(r + 1) * out].iter().map(|v| v.f64()).collect() };
    let n_terms = 2 * (2 + n_local) - 2;
    let scale = 1.0 / (batch * n_terms) as f64;
    let mut loss = 0.0;
    let mut grad_global = vec![T::zero(); student_global.len()];
    let mut grad_local = vec![T::zero(); student_local.len()];
    for b in 0..batch {
        let teachers = [sharpen(&row(teacher_global, 2 * b), tau_t, Some(&center))?, sharpen(&row(teacher_global, 2 * b + 1), tau_t, Some(&center))?];
        let mut student_term = |logits: Vec<f64>, skip: Option<usize>, grad: &mut [T]| -> Result<()> {
            let q = sharpen(&logits, tau_s, None)?;
            for (i, p) in teachers.iter().enumerate() {
                if skip == Some(i) {
                    continue;
                }
                loss += scale * cross_entropy(p, &q);
                let p_mass: f64 = p.iter().sum();
                for j in 0..out {
                    grad[j] += T::c(scale * (q[j] * p_mass - p[j]) / tau_s);
                }
            }
            Ok(())
        };
        for g in 0..2 {
            let r = 2 * b + g;
            student_term(row(student_global, r), Some(g), &mut grad_global[r * out..(r + 1) * out])?;
        }
        for l in 0..n_local {
            let r = n_local * b + l;
            student_term(row(student_local, r), None, &mut grad_local[r * out..(r + 1) * out])?;
        }
    }
    Ok(DinoTerms { loss, grad_global, grad_local })
}

/// Batches the views of several samples: globals sample-major, then locals.
pub fn view_batches<T: Scalar>(samples: &[&ViewSet]) -> Result<(ImageBatch<T>, Option<ImageBatch<T>>, usize)> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let n_local = first.local_views.len();
    let gside = first.global_views.first().map(|v| v.size()).unwrap_or(0);
    let lside = first.local_views.first().map(|v| v.size()).unwrap_or(0);
    let mut g = Vec::new();
    let mut l = Vec::new();
    for s in samples {
        if s.global_views.len() != 2 {
            bail!(Shape, "every sample needs exactly 2 global views, found {}", s.global_views.len());
        }
        if s.local_views.len() != n_local {
            bail!(Shape, "samples in a batch must share the local view count");
        }
        for v in &s.global_views {
            if v.size() != gside {
                bail!(Shape, "global views differ in size");
            }
            g.extend(v.image.iter().map(|&x| T::c(x as f64)));
        }
        for v in &s.local_views {
            if v.size() != lside {
                bail!(Shape, "local views differ in size");
            }
            l.extend(v.image.iter().map(|&x| T::c(x as f64)));
        }
    }
    let local = if n_local > 0 { Some(ImageBatch::new(lside, l)?) } else { None };
    Ok((ImageBatch::new(gside, g)?, local, n_local))
}

/// Runs both networks on `samples` and evaluates the DINO objective.
pub fn dino_loss<T: Scalar>(pair: &DistillationPair<T>, samples: &[&ViewSet]) -> Result<f64> {
    let (global, local, n_local) = view_batches::<T>(samples)?;
    let t = pair.teacher.forward(&global)?;
    let s = pair.student.forward(&global)?;
    let sl = match &local {
        Some(b) => pair.student.forward(b)?.logits,
        None => Vec::new(),
    };
    let out = pair.student.config.head_out_dim;
    Ok(dino_loss_from_logits(&t.logits, &s.logits, &sl, samples.len(), n_local, out, pair.tau_s, pair.tau_t, &pair.center)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, config: &DistillConfig) -> Self {
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::c(self.lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(self.eps);
        let wd = T::c(self.lr * self.weight_decay);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + c1 * g;
            self.v[i] = b2 * self.v[i] + c2 * g * g;
            let denom = (self.v[i] * inv_bc2).sqrt() + eps;
            params[i] -= step * self.m[i] / denom + wd * params[i];
        }
    }
}

/// Regularisation applied inside [`train_step`].
#[derive(Debug, Clone)]
pub struct SpanHook {
    pub config: RegularizerConfig,
    pub assignment: HeadAssignment,
}

/// One sample of a training batch: its views and, when regularising, the
/// knowledge maps carried into each global view.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub views: ViewSet,
    pub global_maps: Option<Vec<ViewMaps>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub dino_loss: f64,
    pub span_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub pair: DistillationPair<T>,
    pub optimizer: Adam<T>,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    pub history: Vec<StepRecord>,
}

impl<T: Scalar> PartialEq for TrainState<T> {
    fn eq(&self, o: &Self) -> bool {
        self.pair == o.pair && self.optimizer == o.optimizer && (self.epoch, self.step, self.seed) == (o.epoch, o.step, o.seed) && self.history == o.history
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn new(vit: &ViTConfig, config: &DistillConfig, seed: u64) -> Result<Self> {
        let student = ParameterSet::init(vit, seed)?;
        let n = student.len();
        Ok(Self { pair: DistillationPair::new(student, config)?, optimizer: Adam::new(n, config), epoch: 0, step: 0, seed, history: Vec::new() })
    }
}

fn all_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

fn cls_rows<T: Scalar>(fwd: &Forward<T>) -> Vec<T> {
    let mut rows = Vec::with_capacity(fwd.batch * fwd.n_heads * fwd.seq);
    for b in 0..fwd.batch {
        for h in 0..fwd.n_heads {
            rows.extend_from_slice(fwd.last_cls_row(b, h));
        }
    }
    rows
}

/// One optimisation step: DINO loss plus optional regularisation, Adam on
/// the student, then EMA and centre updates. On a non-finite loss or
/// gradient the state is left untouched and the step index is reported.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &[TrainSample], span: Option<&SpanHook>) -> Result<StepRecord> {
    let views: Vec<&ViewSet> = batch.iter().map(|s| &s.views).collect();
    let (global, local, n_local) = view_batches::<T>(&views)?;
    let pair = &state.pair;
    let cfg = pair.student.config;
    let span = span.filter(|h| !h.config.is_inactive());
    let teacher_target = span.is_some_and(|h| h.config.target == RegTarget::Teacher);

    let t_fwd = if teacher_target { pair.teacher.forward_train(&global)? } else { pair.teacher.forward(&global)? };
    let s_fwd = pair.student.forward_train(&global)?;
    let l_fwd = match &local {
        Some(b) => Some(pair.student.forward_train(b)?),
        None => None,
    };
    let l_logits = l_fwd.as_ref().map(|f| f.logits.as_slice()).unwrap_or(&[]);
    let dino = dino_loss_from_logits(&t_fwd.logits, &s_fwd.logits, l_logits, batch.len(), n_local, cfg.head_out_dim, pair.tau_s, pair.tau_t, &pair.center)?;

    let mut span_loss = 0.0;
    let mut span_grad = None;
    if let Some(hook) = span {
        let mut maps = Vec::with_capacity(2 * batch.len());
        for s in batch {
            match &s.global_maps {
                Some(m) if m.len() == 2 => maps.extend(m.iter().cloned()),
                _ => bail!(Missing, "regularised training needs knowledge maps for both global views"),
            }
        }
        let src = if teacher_target { &t_fwd } else { &s_fwd };
        let out = combine_span_loss(&cls_rows(src), src.n_heads, src.seq, &maps, cfg.patch_size, &hook.assignment, &hook.config)?;
        span_loss = out.loss;
        span_grad = Some(out.grad);
    }

    let total = dino.loss + span_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite { step: state.step, detail: format!("dino {} span {span_loss}", dino.loss) });
    }
    let mut grad = pair.student.zeros_like();
    let student_attn = if teacher_target { None } else { span_grad.as_deref() };
    pair.student.backward(&s_fwd, &OutputGrads { logits: Some(&dino.grad_global), cls_attention: student_attn, cls_embeddings: None }, &mut grad)?;
    if let Some(f) = &l_fwd {
        pair.student.backward(f, &OutputGrads { logits: Some(&dino.grad_local), ..Default::default() }, &mut grad)?;
    }
    if teacher_target {
        // The teacher's attention gradient is applied to the student, which the
        // teacher then tracks through the moving average.
        let mut tg = pair.teacher.zeros_like();
        pair.teacher.backward(&t_fwd, &OutputGrads { cls_attention: span_grad.as_deref(), ..Default::default() }, &mut tg)?;
        grad.add_assign(&tg);
    }
    if !all_finite(&grad.data) {
        return Err(Error::NonFinite { step: state.step, detail: "gradient".into() });
    }

    let pair = &mut state.pair;
    state.optimizer.step(&mut pair.student.data, &grad.data);
    ema_update(&mut pair.teacher, &pair.student, pair.ema_momentum)?;
    center_update(&mut pair.center, &t_fwd.logits, pair.center_momentum)?;
    let record = StepRecord { dino_loss: dino.loss, span_loss, total };
    state.history.push(record);
    state.step += 1;
    Ok(record)
}

pub fn epoch_log(config_hash: &str) -> CsvTable {
    CsvTable::new(config_hash, &["epoch", "step", "dino_loss", "span_loss", "total", "ema_momentum"])
}

/// Mean of the step records of one epoch, as a log row.
pub fn epoch_row(table: &mut CsvTable, epoch: u64, step: u64, records: &[StepRecord], ema_momentum: f64) {
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    table.row([
        epoch.to_string(),
        step.to_string(),
        format!("{:.8}", mean(|r| r.dino_loss)),
        format!("{:.8}", mean(|r| r.span_loss)),
        format!("{:.8}", mean(|r| r.total)),
        ema_momentum.to_string(),
    ]);
}

impl TrainState<f32> {
    pub fn to_container(&self) -> Result<Container> {
        let p = &self.pair;
        let mut c = Container::default();
        let n = p.student.len();
        c.push("student", vec![n], p.student.data.clone());
        c.push("teacher", vec![n], p.teacher.data.clone());
        c.push("center", vec![p.center.len()], p.center.clone());
        c.push("adam.m", vec![n], self.optimizer.m.clone());
        c.push("adam.v", vec![n], self.optimizer.v.clone());
        c.metadata = serde_json::json!({
            "vit": p.student.config,
            "tau_s": p.tau_s,
            "tau_t": p.tau_t,
            "center_momentum": p.center_momentum,
            "ema_momentum": p.ema_momentum,
            "adam": { "lr": self.optimizer.lr, "beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                      "eps": self.optimizer.eps, "weight_decay": self.optimizer.weight_decay, "t": self.optimizer.t },
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.seed,
            "history": self.history,
        });
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")));
        let vit: ViTConfig = serde_json::from_value(field("vit")?)?;
        let num = |k: &str| -> Result<f64> { field(k)?.as_f64().ok_or_else(|| Error::Format(format!("{k} is not a number"))) };
        let int = |v: serde_json::Value, k: &str| -> Result<u64> { v.as_u64().ok_or_else(|| Error::Format(format!("{k} is not an integer"))) };
        let mut student = ParameterSet::<f32>::zeros(&vit)?;
        let mut teacher = student.clone();
        let copy = |dst: &mut Vec<f32>, name: &str| -> Result<()> {
            let src = c.get(name)?;
            if src.len() != dst.len() {
                bail!(Format, "tensor {name} has {} values, expected {}", src.len(), dst.len());
            }
            dst.copy_from_slice(src);
            Ok(())
        };
        copy(&mut student.data, "student")?;
        copy(&mut teacher.data, "teacher")?;
        let mut center = vec![0.0f32; vit.head_out_dim];
        copy(&mut center, "center")?;
        let adam = field("adam")?;
        let a = |k: &str| adam.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::Format(format!("adam.{k} missing")));
        let mut optimizer = Adam {
            lr: a("lr")?,
            beta1: a("beta1")?,
            beta2: a("beta2")?,
            eps: a("eps")?,
            weight_decay: a("weight_decay")?,
            m: vec![0.0; student.len()],
            v: vec![0.0; student.len()],
            t: adam.get("t").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format("adam.t missing".into()))?,
        };
        copy(&mut optimizer.m, "adam.m")?;
        copy(&mut optimizer.v, "adam.v")?;
        let pair = DistillationPair {
            student,
            teacher,
            tau_s: num("tau_s")?,
            tau_t: num("tau_t")?,
            center,
            center_momentum: num("center_momentum")?,
            ema_momentum: num("ema_momentum")?,
        };
        Ok(Self {
            pair,
            optimizer,
            epoch: int(field("epoch")?, "epoch")?,
            step: int(field("step")?, "step")?,
            seed: int(field("seed")?, "seed")?,
            history: serde_json::from_value(field("history")?)?,
        })
    }
}
