//! AdamW training with stepped learning-rate drops and layerwise decay,
//! checkpointing, and the finite-difference gradient check.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::AttentionMode;
use crate::data::{augment, AugmentConfig, AugmentedSample, MattingSample};
use crate::error::{MatteError, Result};
use crate::inference::{infer, InferenceRequest};
use crate::losses::{total_loss_grad, LossBreakdown};
use crate::metrics::{aggregate, evaluate, MetricsReport, RegionMode};
use crate::model::Model;
use crate::params::{split_prefix, ParamStore};
use crate::plane::{seeded_rng, MattingInput, Plane};
use crate::config::RunConfig;
use crate::tensor::{Real, Tensor};

const FIRST_PREFIX: &str = "optim.first.";
const SECOND_PREFIX: &str = "optim.second.";
const TRAINER_KEY: &str = "trainer";

/// Stepped schedule over a 100-epoch run: full rate, then 0.1x from epoch
/// 30 and 0.05x from epoch 90.
pub fn lr_at(epoch: usize, base_lr: f64) -> f64 {
    if epoch < 30 {
        base_lr
    } else if epoch < 90 {
        0.1 * base_lr
    } else {
        0.05 * base_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// [`lr_at`] on the raw epoch index.
    #[default]
    Stepped,
    /// [`lr_at`] with the epoch rescaled so the drops land at 30% and 90% of
    /// the configured epochs.
    Proportional,
    Constant,
}

pub fn scheduled_lr(schedule: LrSchedule, epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    match schedule {
        LrSchedule::Stepped => lr_at(epoch, base_lr),
        LrSchedule::Proportional => lr_at(epoch * 100 / total_epochs.max(1), base_lr),
        LrSchedule::Constant => base_lr,
    }
}

/// `decay^(L - i)` for transformer layer `i` of `L`.
pub fn layerwise_multipliers(num_layers: usize, decay: f64) -> Vec<f64> {
    (0..num_layers).map(|i| decay.powi((num_layers - i) as i32)).collect()
}

/// Learning-rate multiplier of a model parameter: blocks follow
/// [`layerwise_multipliers`], the embeddings sit one step below the first
/// block and everything else (necks, decoder) gets 1.
pub fn param_multiplier(name: &str, depth: usize, decay: f64) -> f64 {
    if let Some(rest) = name.strip_prefix("blocks.") {
        let i: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(depth);
        decay.powi(depth.saturating_sub(i) as i32)
    } else if name.starts_with("patch_embed.") || name == "pos_embed" {
        decay.powi(depth as i32 + 1)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Moments, step count and per-parameter multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
    pub multipliers: BTreeMap<String, f64>,
    pub decay: BTreeMap<String, bool>,
    pub hyper: AdamW,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &Model<T>, layer_decay: f64, hyper: AdamW) -> Self {
        let depth = model.config.backbone.depth();
        let mut first = ParamStore::new();
        let mut multipliers = BTreeMap::new();
        let mut decay = BTreeMap::new();
        for spec in model.specs() {
            first.insert(&spec.name, Tensor::zeros(&spec.shape));
            multipliers.insert(spec.name.clone(), param_multiplier(&spec.name, depth, layer_decay));
            decay.insert(spec.name.clone(), spec.decay);
        }
        Self { step: 0, second: first.clone(), first, multipliers, decay, hyper }
    }

    /// One decoupled-weight-decay update at rate `lr`.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &HashMap<String, Vec<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamW { beta1, beta2, eps, weight_decay } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| MatteError::MissingParameter(format!("gradient of {name}")))?;
            let rate = lr * self.multipliers.get(name).copied().unwrap_or(1.0);
            let wd = if self.decay.get(name).copied().unwrap_or(true) { weight_decay } else { 0.0 };
            let m = self.first.get_mut(name)?.data_mut();
            let v = self.second.get_mut(name)?.data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i].f64();
                let mi = beta1 * m[i].f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let step = (mi / c1) / ((vi / c2).sqrt() + eps);
                *w = T::of(w.f64() * (1.0 - rate * wd) - rate * step);
            }
        }
        Ok(())
    }
}

/// Network input with its ground-truth alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput<T = f32> {
    pub input: MattingInput<T>,
    pub alpha: Plane<T>,
}

impl From<&AugmentedSample> for LabeledInput<f32> {
    fn from(s: &AugmentedSample) -> Self {
        Self { input: s.input(), alpha: s.sample.alpha.clone() }
    }
}

impl<T: Real> LabeledInput<T> {
    pub fn cast<U: Real>(&self) -> LabeledInput<U> {
        LabeledInput { input: self.input.cast(), alpha: self.alpha.cast() }
    }
}

/// Loss and parameter gradients of one sample (training-mode attention).
pub fn loss_and_grads<T: Real>(model: &Model<T>, sample: &LabeledInput<T>) -> Result<(LossBreakdown, HashMap<String, Vec<T>>)> {
    let mut g = Graph::training();
    let x = g.constant(sample.input.stacked().to_tensor());
    let out = model.forward_graph(&mut g, x, AttentionMode::Normal)?;
    let pred = Plane::from_tensor(g.value(out).clone())?;
    let (loss, seed) = total_loss_grad(&pred, &sample.alpha, &sample.input.trimap)?;
    Ok((loss, g.backward(out, seed).into_named()))
}

fn loss_only<T: Real>(model: &Model<T>, sample: &LabeledInput<T>) -> Result<f64> {
    let pred = model.predict(&sample.input, AttentionMode::Normal)?;
    Ok(crate::losses::total_loss(&pred, &sample.alpha, &sample.input.trimap)?.total)
}

/// Mean loss over `batch` (samples processed in order), then one optimizer
/// update. Returns the pre-update losses.
pub fn train_step<T: Real>(model: &mut Model<T>, batch: &[LabeledInput<T>], opt: &mut OptimizerState<T>, lr: f64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(MatteError::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut acc: HashMap<String, Vec<T>> = HashMap::new();
    for (k, sample) in batch.iter().enumerate() {
        let (loss, grads) = loss_and_grads(model, sample)?;
        if !loss.total.is_finite() {
            return Err(MatteError::NonFiniteLoss {
                step: opt.step,
                detail: format!("sample {k}: l1 {} lap {} gp {}", loss.separate_l1, loss.laplacian, loss.gradient_penalty),
            });
        }
        mean.separate_l1 += scale * loss.separate_l1;
        mean.laplacian += scale * loss.laplacian;
        mean.gradient_penalty += scale * loss.gradient_penalty;
        mean.total += scale * loss.total;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for (name, g) in &mut acc {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(MatteError::NonFiniteLoss { step: opt.step, detail: format!("gradient of {name}[{i}]") });
        }
        g.iter_mut().for_each(|v| *v = T::of(v.f64() * scale));
    }
    opt.apply(&mut model.params, &acc, lr)?;
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central differences (step `1e-5`) of the total loss against the analytic
/// gradient on `scalars` randomly chosen parameter entries.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-3 * max|a|)`, the floor
/// keeping exactly cancelling entries from being compared against rounding
/// noise.
pub fn grad_check(model: &Model<f64>, sample: &LabeledInput<f64>, scalars: usize, seed: u64) -> Result<GradCheckReport> {
    const STEP: f64 = 1e-5;
    let (_, grads) = loss_and_grads(model, sample)?;
    let names: Vec<(String, usize)> = model.params.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let mut rng = seeded_rng(seed);
    let picks = rand::seq::index::sample(&mut rng, total, scalars.min(total)).into_vec();
    let locate = |mut flat: usize| {
        for (n, len) in &names {
            if flat < *len {
                return (n.clone(), flat);
            }
            flat -= len;
        }
        unreachable!("index inside parameter range")
    };
    let mut probe = model.clone();
    let mut rows = Vec::with_capacity(picks.len());
    for flat in picks {
        let (name, i) = locate(flat);
        let orig = probe.params.get(&name)?.data()[i];
        probe.params.get_mut(&name)?.data_mut()[i] = orig + STEP;
        let plus = loss_only(&probe, sample)?;
        probe.params.get_mut(&name)?.data_mut()[i] = orig - STEP;
        let minus = loss_only(&probe, sample)?;
        probe.params.get_mut(&name)?.data_mut()[i] = orig;
        let analytic = grads.get(&name).map_or(0.0, |g| g[i]);
        rows.push((name, i, analytic, (plus - minus) / (2.0 * STEP)));
    }
    let floor = 1e-3 * rows.iter().map(|r| r.2.abs()).fold(0.0, f64::max);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: rows.len(),
    };
    for (name, i, a, n) in rows {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor).max(f64::MIN_POSITIVE);
        if err >= report.max_rel_error {
            report = GradCheckReport { max_rel_error: err, worst_param: name, worst_index: i, analytic: a, numeric: n, ..report };
        }
    }
    Ok(report)
}

/// Everything that shapes a training run besides the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub run: RunConfig,
    pub augment: AugmentConfig,
    pub schedule: LrSchedule,
    pub adamw: AdamW,
    /// Optimizer steps per epoch; defaults to one pass over the data.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let run = RunConfig::default();
        let adamw = AdamW { weight_decay: run.weight_decay, ..AdamW::default() };
        Self { augment: AugmentConfig { crop: run.crop_size, ..AugmentConfig::default() }, run, schedule: LrSchedule::Stepped, adamw, steps_per_epoch: None }
    }
}

impl TrainOptions {
    pub fn tiny() -> Self {
        let run = RunConfig::tiny();
        Self {
            augment: AugmentConfig { crop: run.crop_size, kernel_max: 10, ..AugmentConfig::default() },
            run,
            schedule: LrSchedule::Proportional,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerMeta {
    options: TrainOptions,
    step: u64,
}

/// Stateful loop over an in-memory sample list. Batches and augmentation are
/// derived from `(seed, step)` only, so a resumed run continues exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: OptimizerState<f32>,
    pub options: TrainOptions,
}

fn mix(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [a, b] {
        z = (z ^ v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

impl Trainer {
    pub fn new(model: Model<f32>, options: TrainOptions) -> Result<Self> {
        options.run.validate(model.config.backbone.patch_size)?;
        let opt = OptimizerState::new(&model, options.run.layer_decay, options.adamw);
        Ok(Self { model, opt, options })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        self.options.steps_per_epoch.unwrap_or_else(|| n.div_ceil(self.options.run.batch_size)).max(1)
    }

    pub fn epoch_of(&self, step: u64, n: usize) -> usize {
        (step / self.steps_per_epoch(n) as u64) as usize
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        scheduled_lr(self.options.schedule, epoch, self.options.run.epochs, self.options.run.base_lr)
    }

    /// The augmented batch used at `step`.
    pub fn batch_for(&self, data: &[MattingSample], step: u64) -> Result<Vec<LabeledInput<f32>>> {
        if data.is_empty() {
            return Err(MatteError::Config("no training samples".into()));
        }
        let spe = self.steps_per_epoch(data.len()) as u64;
        let seed = self.options.run.seed;
        let (epoch, within) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded_rng(mix(seed, 1, epoch, 0)));
        let b = self.options.run.batch_size;
        (0..b)
            .map(|k| {
                let idx = order[(within as usize * b + k) % data.len()];
                let mut rng = seeded_rng(mix(seed, 2, step, k as u64));
                augment(&data[idx], &self.options.augment, &mut rng).map(|s| LabeledInput::from(&s))
            })
            .collect()
    }

    pub fn step(&mut self, data: &[MattingSample]) -> Result<LossBreakdown> {
        let step = self.opt.step;
        let batch = self.batch_for(data, step)?;
        let lr = self.lr_for_epoch(self.epoch_of(step, data.len()));
        train_step(&mut self.model, &batch, &mut self.opt, lr)
    }

    /// Runs the remaining steps of the current epoch.
    pub fn run_epoch(&mut self, data: &[MattingSample]) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.epoch_of(self.opt.step, data.len());
        let spe = self.steps_per_epoch(data.len()) as u64;
        let end = (epoch as u64 + 1) * spe;
        let lr = self.lr_for_epoch(epoch);
        let mut sum = LossBreakdown::default();
        let mut count = 0.0;
        while self.opt.step < end {
            let l = self.step(data)?;
            sum.separate_l1 += l.separate_l1;
            sum.laplacian += l.laplacian;
            sum.gradient_penalty += l.gradient_penalty;
            sum.total += l.total;
            count += 1.0;
        }
        let c = f64::max(count, 1.0);
        let loss = LossBreakdown {
            separate_l1: sum.separate_l1 / c,
            laplacian: sum.laplacian / c,
            gradient_penalty: sum.gradient_penalty / c,
            total: sum.total / c,
        };
        Ok(EpochLog { epoch, step: self.opt.step, lr, loss, seconds: start.elapsed().as_secs_f64() })
    }

    /// Trains until `options.run.epochs`, calling `log` after every epoch.
    pub fn fit(&mut self, data: &[MattingSample], mut log: impl FnMut(&EpochLog)) -> Result<()> {
        while self.epoch_of(self.opt.step, data.len()) < self.options.run.epochs {
            let entry = self.run_epoch(data)?;
            log(&entry);
        }
        Ok(())
    }

    /// Model, optimizer moments and trainer metadata in one archive.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = TrainerMeta { options: self.options.clone(), step: self.opt.step };
        let metadata = serde_json::json!({ TRAINER_KEY: serde_json::to_value(&meta)? });
        self.model.save(dir, &[(FIRST_PREFIX, &self.opt.first), (SECOND_PREFIX, &self.opt.second)], metadata)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (model, all, meta) = Model::<f32>::load(dir)?;
        let meta: TrainerMeta = serde_json::from_value(
            meta.get(TRAINER_KEY).cloned().ok_or_else(|| MatteError::Checkpoint("archive has no trainer state".into()))?,
        )?;
        let mut t = Self::new(model, meta.options)?;
        t.opt.first = split_prefix(&all, FIRST_PREFIX);
        t.opt.second = split_prefix(&all, SECOND_PREFIX);
        let specs = t.model.specs();
        t.opt.first.check_against(&specs)?;
        t.opt.second.check_against(&specs)?;
        t.opt.step = meta.step;
        Ok(t)
    }
}

/// Predicts every sample and aggregates the metrics.
pub fn evaluate_model<T: Real>(model: &Model<T>, set: &[LabeledInput<T>], strategy: AttentionMode, mode: RegionMode) -> Result<MetricsReport> {
    let reports = set
        .iter()
        .map(|s| {
            let pred = infer(model, &InferenceRequest { input: s.input.clone(), strategy })?;
            evaluate(&pred, &s.alpha, &s.input.trimap, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports).ok_or_else(|| MatteError::Config("empty evaluation set".into()))
}
