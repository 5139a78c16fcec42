//! Multi-iteration L1 training, the learning-rate schedule, the optimizer
//! and the ablation runner.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, Predictor, Protocol};
use crate::metrics::MetricReport;
use crate::model::{count_parameters, Architecture, Model, ModelConfig, ParamScope, Prediction};
use crate::nn::{Graph, Tape};
use crate::synth::{AnnotatedSample, SceneSample, Triplet};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    AllIterations,
    FinalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Random subset of instances per draw.
    Part,
    /// Every instance.
    All,
    /// Network sees an empty mask; target removes all text.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lambda: f64,
    /// `K`, iterations unrolled during training.
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
    pub supervise: Supervision,
    pub predict: Prediction,
    pub use_context: bool,
    pub use_prev_image: bool,
    pub share_weights: bool,
    pub mask_mode: MaskMode,
    /// Stop after this many optimizer steps even if epochs remain. The
    /// schedule is laid out over the capped length.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            epochs: 200,
            batch_size: 2,
            crop: 256,
            lambda: 0.85,
            iterations: 8,
            alpha: 0.4,
            seed: 0,
            supervise: Supervision::AllIterations,
            predict: Prediction::Residual,
            use_context: true,
            use_prev_image: true,
            share_weights: true,
            mask_mode: MaskMode::Part,
            max_steps: None,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must be in (0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.crop == 0 {
            return bad("iterations, batch_size and crop must be >= 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            erasing_module: true,
            predict: self.predict,
            use_context: self.use_context,
            use_prev_image: self.use_prev_image,
            share_weights: self.share_weights,
        }
    }

    /// Model configuration with this run's iteration count and structural
    /// switches applied.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            iterations: self.iterations,
            arch: Architecture {
                erasing_module: base.arch.erasing_module,
                ..self.architecture()
            },
            ..base.clone()
        }
    }

    /// Applies one `key = value` pair. Model keys go to `model`.
    fn apply(&mut self, model: &mut ModelConfig, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "base_lr" => self.base_lr = parse_num(value)?,
            "epochs" => self.epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "crop" => self.crop = parse_num(value)?,
            "lambda" => self.lambda = parse_num(value)?,
            "K" | "iterations" => self.iterations = parse_num(value)?,
            "alpha" => self.alpha = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "supervise" => {
                self.supervise = match value {
                    "all_iterations" => Supervision::AllIterations,
                    "final_only" => Supervision::FinalOnly,
                    _ => return Err(format!("supervise must be all_iterations or final_only, got {value:?}")),
                }
            }
            "predict" => {
                self.predict = match value {
                    "residual" => Prediction::Residual,
                    "direct" => Prediction::Direct,
                    _ => return Err(format!("predict must be residual or direct, got {value:?}")),
                }
            }
            "use_context" => self.use_context = parse_bool(value)?,
            "use_prev_image" => self.use_prev_image = parse_bool(value)?,
            "share_weights" => self.share_weights = parse_bool(value)?,
            "mask_mode" => {
                self.mask_mode = match value {
                    "part" => MaskMode::Part,
                    "all" => MaskMode::All,
                    "none" => MaskMode::None,
                    _ => return Err(format!("mask_mode must be part, all or none, got {value:?}")),
                }
            }
            "max_steps" => self.max_steps = if value == "none" { None } else { Some(parse_num(value)?) },
            "latent_channels" => model.latent_channels = parse_num(value)?,
            "backbone_width" => model.backbone_width = parse_num(value)?,
            "num_residual_blocks" => model.num_residual_blocks = parse_num(value)?,
            "kernel_size" => model.kernel_size = parse_num(value)?,
            "leaky_slope" => model.leaky_slope = parse_num(value)?,
            "head_hidden" => model.head_hidden = parse_num(value)?,
            "extractor_hidden" => model.extractor_hidden = parse_num(value)?,
            "extractor_out" => model.extractor_out = parse_num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses the flat `key = value` config format (`#` starts a comment).
    /// Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<(TrainConfig, ModelConfig)> {
        let mut cfg = TrainConfig::default();
        let mut model = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?;
            cfg.apply(&mut model, key.trim(), value.trim())
                .map_err(|reason| Error::Config { line: i + 1, reason })?;
        }
        cfg.validate()?;
        model.iterations = cfg.iterations;
        model.arch = cfg.model_config(&model).arch;
        model.validate()?;
        Ok((cfg, model))
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self, model: &ModelConfig) -> String {
        let mut s = String::new();
        let sup = match self.supervise {
            Supervision::AllIterations => "all_iterations",
            Supervision::FinalOnly => "final_only",
        };
        let pred = match self.predict {
            Prediction::Residual => "residual",
            Prediction::Direct => "direct",
        };
        let mm = match self.mask_mode {
            MaskMode::Part => "part",
            MaskMode::All => "all",
            MaskMode::None => "none",
        };
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "K = {}", self.iterations);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "supervise = {sup}");
        let _ = writeln!(s, "predict = {pred}");
        let _ = writeln!(s, "use_context = {}", self.use_context);
        let _ = writeln!(s, "use_prev_image = {}", self.use_prev_image);
        let _ = writeln!(s, "share_weights = {}", self.share_weights);
        let _ = writeln!(s, "mask_mode = {mm}");
        match self.max_steps {
            Some(n) => {
                let _ = writeln!(s, "max_steps = {n}");
            }
            None => {
                let _ = writeln!(s, "max_steps = none");
            }
        }
        let _ = writeln!(s, "latent_channels = {}", model.latent_channels);
        let _ = writeln!(s, "backbone_width = {}", model.backbone_width);
        let _ = writeln!(s, "num_residual_blocks = {}", model.num_residual_blocks);
        let _ = writeln!(s, "kernel_size = {}", model.kernel_size);
        let _ = writeln!(s, "leaky_slope = {}", model.leaky_slope);
        let _ = writeln!(s, "head_hidden = {}", model.head_hidden);
        let _ = writeln!(s, "extractor_hidden = {}", model.extractor_hidden);
        let _ = writeln!(s, "extractor_out = {}", model.extractor_out);
        s
    }
}

// ------------------------------------------------------------------ loss

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted mean absolute error of each iteration's prediction.
    pub per_iteration: Vec<f64>,
    pub step: usize,
    pub lr: f64,
}

/// Weight of iteration `k` (1-based) out of `iterations`: `λ^(K−k)`.
pub fn iteration_weight(lambda: f64, k: usize, iterations: usize) -> f64 {
    lambda.powi((iterations - k) as i32)
}

fn mean_abs_diff<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// `Σ_k λ^(K−k) · mean|I_gt − I_k|`.
pub fn weighted_l1_loss<T: Float>(predictions: &[Tensor<T>], gt: &Tensor<T>, lambda: f64) -> Result<LossReport> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let k_total = predictions.len();
    let mut per_iteration = Vec::with_capacity(k_total);
    let mut total = 0.0;
    for (i, p) in predictions.iter().enumerate() {
        if p.shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs gt {:?}", p.shape(), gt.shape())));
        }
        let d = mean_abs_diff(p, gt);
        total += iteration_weight(lambda, i + 1, k_total) * d;
        per_iteration.push(d);
    }
    Ok(LossReport {
        total,
        per_iteration,
        step: 0,
        lr: 0.0,
    })
}

/// Loss of one sample and its gradient w.r.t. every parameter.
pub fn loss_and_gradients<T: Float>(
    model: &Model<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    gt: &Tensor<T>,
    iterations: usize,
    lambda: f64,
    supervise: Supervision,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    let mut tape = Tape::new(model.params());
    let i = tape.input(image.clone());
    let m = tape.input(mask.clone());
    let (preds, _, _) = model.graph_forward(&mut tape, &i, &m, iterations);
    let values: Vec<Tensor<T>> = preds.iter().map(|p| tape.value(p).clone()).collect();
    let mut report = weighted_l1_loss(&values, gt, lambda)?;
    let k_total = preds.len();
    if supervise == Supervision::FinalOnly {
        report.total = *report.per_iteration.last().expect("non-empty");
    }
    let n = gt.len() as f64;
    let mut seeds = Vec::new();
    for (idx, p) in preds.iter().enumerate() {
        let k = idx + 1;
        let w = match supervise {
            Supervision::AllIterations => iteration_weight(lambda, k, k_total),
            Supervision::FinalOnly if k == k_total => 1.0,
            Supervision::FinalOnly => continue,
        };
        let scale = T::from_f64(w / n);
        let g = values[idx].zip_map(gt, |pred, target| {
            if pred > target {
                scale
            } else if pred < target {
                -scale
            } else {
                T::ZERO
            }
        });
        seeds.push((*p, g));
    }
    let grads = tape.backward(seeds);
    Ok((report, grads))
}

// -------------------------------------------------------------- schedule

pub const WARMUP_FRACTION: f64 = 0.3;
pub const START_DIV: f64 = 25.0;
pub const FINAL_DIV: f64 = 1e4;

/// One-cycle learning rate: linear warm-up from `base/25` to `base` over
/// the first 30 % of steps, then cosine decay to `base/10⁴`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let start = base_lr / START_DIV;
    let end = base_lr / FINAL_DIV;
    if total_steps <= 1 {
        return base_lr;
    }
    let last = (total_steps - 1) as f64;
    let peak = (WARMUP_FRACTION * last).round();
    let s = (step as f64).min(last);
    if s <= peak {
        if peak == 0.0 {
            return base_lr;
        }
        start + (base_lr - start) * s / peak
    } else {
        let t = (s - peak) / (last - peak);
        end + (base_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

// ------------------------------------------------------------- optimizer

/// Adam with β = (0.9, 0.999), ε = 1e-8, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model<f32>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: model.params().zeros_like(),
            v: model.params().zeros_like(),
        }
    }

    pub fn update(&mut self, model: &mut Model<f32>, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (idx, param) in model.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            for j in 0..param.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                param.data[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

// ------------------------------------------------------------------ data

/// Where a training sample comes from; decides how masks are drawn.
#[derive(Clone, Debug)]
pub enum TrainSource {
    /// Used as-is (the mask is only blanked for [`MaskMode::None`]).
    Fixed(Triplet),
    /// Exact partial rendering of a synthetic scene.
    Scene(SceneSample),
    /// Disk sample; partial targets come from compositing.
    Annotated(AnnotatedSample),
}

impl TrainSource {
    pub fn draw(&self, mode: MaskMode, alpha: f64, seed: u64) -> Triplet {
        let mut t = match (self, mode) {
            (TrainSource::Fixed(t), _) => t.clone(),
            (TrainSource::Scene(s), MaskMode::Part) => crate::synth::make_triplet(s, alpha, seed),
            (TrainSource::Scene(s), _) => crate::synth::make_triplet(s, 0.0, seed),
            (TrainSource::Annotated(a), MaskMode::Part) => a.part_triplet(alpha, seed),
            (TrainSource::Annotated(a), _) => a.full_triplet(),
        };
        if mode == MaskMode::None {
            t.mask = Tensor::zeros(1, t.mask.height(), t.mask.width());
        }
        t
    }
}

/// Window origin `(y0, x0)` for a `crop×crop` window. When the mask has
/// any set pixel the window is guaranteed to contain one.
pub fn sample_crop(mask: &Tensor<f32>, crop: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    if crop > h || crop > w {
        return Err(Error::InvalidArgument(format!("crop {crop} exceeds sample size {h}x{w}")));
    }
    let count = mask.data().iter().filter(|&&v| v > 0.5).count();
    if count == 0 {
        return Ok((rng.gen_range(0..=h - crop), rng.gen_range(0..=w - crop)));
    }
    let pick = rng.gen_range(0..count);
    let idx = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .nth(pick)
        .map(|(i, _)| i)
        .expect("pick < count");
    let (py, px) = (idx / w, idx % w);
    let y0 = rng.gen_range(py.saturating_sub(crop - 1)..=py.min(h - crop));
    let x0 = rng.gen_range(px.saturating_sub(crop - 1)..=px.min(w - crop));
    Ok((y0, x0))
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// --------------------------------------------------------------- trainer

/// Training state: model, optimizer and position in the schedule.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub step: usize,
    pub epoch: usize,
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let per_epoch = dataset_len.div_ceil(config.batch_size);
        let mut total = config.epochs * per_epoch;
        if let Some(cap) = config.max_steps {
            total = total.min(cap);
        }
        let optimizer = Adam::new(&model);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
            epoch: 0,
            total_steps: total,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    /// One pass over `data` in seeded shuffled order. Stops early when the
    /// step budget is exhausted.
    pub fn train_epoch(&mut self, data: &[TrainSource], mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let cfg = self.config.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, self.epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            if self.finished() {
                break;
            }
            let lr = lr_schedule(self.step, self.total_steps, cfg.base_lr);
            let mut grads = self.model.params().zeros_like();
            let mut total = 0.0;
            let mut per_iteration: Vec<f64> = Vec::new();
            for &idx in batch {
                let t = data[idx].draw(cfg.mask_mode, cfg.alpha, mix_seed(cfg.seed, self.epoch as u64, idx as u64 + 1));
                t.validate()?;
                let (y0, x0) = sample_crop(&t.mask, cfg.crop, &mut rng)?;
                let image = t.image.crop(y0, x0, cfg.crop, cfg.crop)?;
                let mask = t.mask.crop(y0, x0, cfg.crop, cfg.crop)?;
                let gt = t.gt.crop(y0, x0, cfg.crop, cfg.crop)?;
                let (rep, g) = loss_and_gradients(&self.model, &image, &mask, &gt, cfg.iterations, cfg.lambda, cfg.supervise)?;
                total += rep.total;
                if per_iteration.is_empty() {
                    per_iteration = vec![0.0; rep.per_iteration.len()];
                }
                for (a, b) in per_iteration.iter_mut().zip(&rep.per_iteration) {
                    *a += b;
                }
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.iter_mut().zip(gi) {
                        *a += b;
                    }
                }
            }
            let n = batch.len() as f64;
            let report = LossReport {
                total: total / n,
                per_iteration: per_iteration.iter().map(|v| v / n).collect(),
                step: self.step,
                lr,
            };
            if !report.total.is_finite() || report.per_iteration.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    lr,
                    total: report.total,
                    per_iteration: report.per_iteration,
                });
            }
            let inv = 1.0 / n as f32;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            self.optimizer.update(&mut self.model, &grads, lr);
            self.step += 1;
            on_step(&report);
            reports.push(report);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Runs epochs until the configured epoch count or step cap is reached.
    pub fn fit(&mut self, data: &[TrainSource], mut on_step: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs && !self.finished() {
            all.extend(self.train_epoch(data, &mut on_step)?);
        }
        Ok(all)
    }
}

/// Functional form: consumes the model, runs one epoch, returns the
/// updated model and per-step reports.
pub fn train_epoch(model: Model<f32>, dataset: &[TrainSource], config: &TrainConfig) -> Result<(Model<f32>, Vec<LossReport>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut trainer = Trainer::new(model, config.clone(), dataset.len())?;
    let reports = trainer.train_epoch(dataset, |_| {})?;
    Ok((trainer.model, reports))
}

// -------------------------------------------------------------- ablation

/// Ablation variants. Names are the CLI spellings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoErasingModule,
    DirectPrediction,
    NoContext,
    NoPrevImage,
    UnsharedWeights,
    FinalOnly,
    NoMask,
    AllMask,
    /// Train with `K = n`.
    TrainIters(usize),
}

impl Variant {
    pub const NAMES: &'static [&'static str] = &[
        "full",
        "no_erasing_module",
        "direct_prediction",
        "no_context",
        "no_prev_image",
        "unshared_weights",
        "final_only",
        "no_mask",
        "all_mask",
        "train_iters_<N>",
    ];

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoErasingModule => "no_erasing_module".into(),
            Variant::DirectPrediction => "direct_prediction".into(),
            Variant::NoContext => "no_context".into(),
            Variant::NoPrevImage => "no_prev_image".into(),
            Variant::UnsharedWeights => "unshared_weights".into(),
            Variant::FinalOnly => "final_only".into(),
            Variant::NoMask => "no_mask".into(),
            Variant::AllMask => "all_mask".into(),
            Variant::TrainIters(n) => format!("train_iters_{n}"),
        }
    }

    /// Training and model configuration for this variant.
    pub fn apply(&self, train: &TrainConfig, model: &ModelConfig) -> (TrainConfig, ModelConfig) {
        let mut t = train.clone();
        let mut erasing_module = true;
        match self {
            Variant::Full => {}
            Variant::NoErasingModule => erasing_module = false,
            Variant::DirectPrediction => t.predict = Prediction::Direct,
            Variant::NoContext => t.use_context = false,
            Variant::NoPrevImage => t.use_prev_image = false,
            Variant::UnsharedWeights => t.share_weights = false,
            Variant::FinalOnly => t.supervise = Supervision::FinalOnly,
            Variant::NoMask => t.mask_mode = MaskMode::None,
            Variant::AllMask => t.mask_mode = MaskMode::All,
            Variant::TrainIters(n) => t.iterations = *n,
        }
        let mut m = t.model_config(model);
        m.arch.erasing_module = erasing_module;
        (t, m)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no_erasing_module" => Variant::NoErasingModule,
            "direct_prediction" => Variant::DirectPrediction,
            "no_context" => Variant::NoContext,
            "no_prev_image" => Variant::NoPrevImage,
            "unshared_weights" => Variant::UnsharedWeights,
            "final_only" => Variant::FinalOnly,
            "no_mask" => Variant::NoMask,
            "all_mask" => Variant::AllMask,
            other => match other.strip_prefix("train_iters_").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) if n >= 1 => Variant::TrainIters(n),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown variant {other:?}; valid: {}",
                        Variant::NAMES.join(", ")
                    )))
                }
            },
        })
    }
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
    pub params: usize,
    pub train_iterations: usize,
    pub eval_iterations: usize,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "Variant,K_train,K_eval,PSNR,MSSIM,MSE,AGE,pEPs,pCEPS,Para.";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.variant,
            self.train_iterations,
            self.eval_iterations,
            self.report.to_csv_row(),
            self.params as f64 / 1e6
        )
    }
}

/// Trained model plus its table row.
pub struct AblationResult {
    pub row: AblationRow,
    pub model: Model<f32>,
}

/// Trains `variant` on `train` and scores it on `eval` (raw protocol).
/// `eval_iterations` defaults to the variant's training `K`.
pub fn run_ablation(
    variant: Variant,
    base_train: &TrainConfig,
    base_model: &ModelConfig,
    train: &[TrainSource],
    eval: &[Triplet],
    eval_iterations: Option<usize>,
) -> Result<AblationResult> {
    let (tcfg, mcfg) = variant.apply(base_train, base_model);
    let model = Model::<f32>::init(mcfg, tcfg.seed)?;
    let mut trainer = Trainer::new(model, tcfg.clone(), train.len())?;
    trainer.fit(train, |_| {})?;
    let k_eval = eval_iterations.unwrap_or(tcfg.iterations);
    let eval_set: Vec<Triplet> = if tcfg.mask_mode == MaskMode::None {
        eval.iter()
            .map(|t| Triplet {
                mask: Tensor::zeros(1, t.mask.height(), t.mask.width()),
                ..t.clone()
            })
            .collect()
    } else {
        eval.to_vec()
    };
    let report = evaluate_dataset(
        &Predictor::Model {
            model: &trainer.model,
            iterations: k_eval,
        },
        &eval_set,
        Protocol::Raw,
    )?;
    let row = AblationRow {
        variant: variant.name(),
        params: count_parameters(&trainer.model, ParamScope::All),
        train_iterations: tcfg.iterations,
        eval_iterations: k_eval,
        report,
    };
    Ok(AblationResult { row, model: trainer.model })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_arithmetic() {
        let gt = Tensor::<f64>::zeros(3, 2, 2);
        let p = |d: f64| Tensor::<f64>::filled(3, 2, 2, d);
        let r = weighted_l1_loss(&[p(1.0), p(1.0)], &gt, 0.85).unwrap();
        assert!((r.total - 1.85).abs() < 1e-12);
        let r = weighted_l1_loss(&[p(0.3), p(0.2), p(0.1)], &gt, 0.85).unwrap();
        for (got, want) in r.per_iteration.iter().zip([0.3, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((r.total - 0.48675).abs() < 1e-12);
        let zero = weighted_l1_loss(&[gt.clone(), gt.clone()], &gt, 0.85).unwrap();
        assert_eq!(zero.total, 0.0);
        assert!(weighted_l1_loss(&[p(1.0)], &gt, 0.0).is_err());
        assert!(weighted_l1_loss(&[p(1.0)], &gt, -1.0).is_err());
    }

    #[test]
    fn weights_grow_geometrically() {
        for k in 1..8 {
            for k2 in k + 1..=8 {
                let ratio = iteration_weight(0.85, k, 8) / iteration_weight(0.85, k2, 8);
                assert!((ratio - 0.85f64.powi((k2 - k) as i32)).abs() < 1e-12);
            }
        }
        assert_eq!(iteration_weight(0.85, 8, 8), 1.0);
    }

    #[test]
    fn schedule_shape() {
        let total = 1000;
        let base = 1e-4;
        assert!((lr_schedule(0, total, base) - base / 25.0).abs() < 1e-18);
        let peak_step = (0.3 * (total - 1) as f64).round() as usize;
        let peak = (0..total).map(|s| lr_schedule(s, total, base)).fold(0.0, f64::max);
        assert!((peak - base).abs() < 1e-9 * base);
        assert!((lr_schedule(peak_step, total, base) - base).abs() < 1e-3 * base);
        let mut prev = 0.0;
        for s in 0..total {
            let lr = lr_schedule(s, total, base);
            assert!(lr > 0.0);
            if s <= peak_step {
                assert!(lr >= prev);
            } else if s > peak_step + 1 {
                assert!(lr <= prev);
            }
            prev = lr;
        }
        assert!((lr_schedule(total - 1, total, base) - base / 1e4).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trip() {
        let (cfg, model) = TrainConfig::parse("# toy\nK = 4\nbase_lr = 0.002\nmask_mode = all\nlatent_channels = 16\nmax_steps = 50\n").unwrap();
        assert_eq!(cfg.iterations, 4);
        assert_eq!(cfg.mask_mode, MaskMode::All);
        assert_eq!(cfg.max_steps, Some(50));
        assert_eq!(model.latent_channels, 16);
        assert_eq!(model.iterations, 4);
        let (cfg2, model2) = TrainConfig::parse(&cfg.to_text(&model)).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(model, model2);
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = TrainConfig::parse("K = 4\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        assert!(TrainConfig::parse("lambda = 0").is_err());
        assert!(TrainConfig::parse("K 4").is_err());
    }

    #[test]
    fn crop_window_touches_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = Tensor::<f32>::zeros(1, 40, 50);
        mask.set(0, 37, 2, 1.0);
        for _ in 0..200 {
            let (y0, x0) = sample_crop(&mask, 16, &mut rng).unwrap();
            assert!(y0 + 16 <= 40 && x0 + 16 <= 50);
            assert!((y0..y0 + 16).contains(&37) && (x0..x0 + 16).contains(&2));
        }
        let empty = Tensor::<f32>::zeros(1, 20, 20);
        for _ in 0..50 {
            let (y0, x0) = sample_crop(&empty, 20, &mut rng).unwrap();
            assert_eq!((y0, x0), (0, 0));
        }
        assert!(sample_crop(&empty, 21, &mut rng).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for name in ["full", "no_erasing_module", "direct_prediction", "no_context", "no_prev_image", "unshared_weights", "final_only", "no_mask", "all_mask", "train_iters_6"] {
            assert_eq!(name.parse::<Variant>().unwrap().name(), name);
        }
        assert!("train_iters_0".parse::<Variant>().is_err());
        assert!("bogus".parse::<Variant>().is_err());
    }
}
