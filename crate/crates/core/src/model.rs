//! The recurrent erasing network.
//!
//! A full-resolution residual backbone turns the image and its erase mask
//! into a context feature `E_I` and an initial latent `l_0`. A single
//! erasing module is then applied `K` times. Each application
//!
//! 1. encodes the previous prediction `I_{k-1}` together with `E_I`
//!    (erasing feature extractor),
//! 2. updates the latent with a convolutional gated recurrent unit,
//! 3. predicts a residual image `r_k` from the new latent,
//!
//! and the prediction becomes `I_k = clamp(I_0 + r_k, 0, 1)`. The residual is
//! always anchored to the original input, never to `I_{k-1}`.
//!
//! No layer changes spatial resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, Eager, Graph, ParamGroup, ParamStore};
use crate::tensor::{Float, Tensor};

/// What the erasing module's head produces each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// `I_k = clamp(I_0 + r_k)`.
    #[default]
    Residual,
    /// `I_k = clamp(head(l_k))`.
    Direct,
}

/// Structural switches used by the ablation variants. The default is the
/// full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// When false the backbone is followed by one residual prediction head
    /// on `E_I` and the network emits a single prediction.
    pub erasing_module: bool,
    pub predict: Prediction,
    /// Feed `E_I` into the erasing feature extractor.
    pub use_context: bool,
    /// Feed `I_{k-1}` into the erasing feature extractor.
    pub use_prev_image: bool,
    /// One erasing-module parameter set for all iterations, or one per
    /// iteration.
    pub share_weights: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            erasing_module: true,
            predict: Prediction::Residual,
            use_context: true,
            use_prev_image: true,
            share_weights: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `D`, channels of `E_I`, `l_k` and `f_k`.
    pub latent_channels: usize,
    /// Channels inside the backbone's residual blocks.
    pub backbone_width: usize,
    pub num_residual_blocks: usize,
    /// `K`, the default iteration count.
    pub iterations: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    /// Hidden channels of the residual prediction head.
    pub head_hidden: usize,
    /// Output channels of the first and second convolution applied to
    /// `I_{k-1}` in the erasing feature extractor.
    pub extractor_hidden: usize,
    pub extractor_out: usize,
    pub arch: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 64,
            backbone_width: 96,
            num_residual_blocks: 6,
            iterations: 8,
            kernel_size: 3,
            leaky_slope: 0.2,
            head_hidden: 128,
            extractor_hidden: 16,
            extractor_out: 29,
            arch: Architecture::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.latent_channels == 0 {
            return bad("latent_channels must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if self.backbone_width == 0 || self.head_hidden == 0 {
            return bad("layer widths must be >= 1");
        }
        if self.arch.erasing_module
            && self.arch.use_prev_image
            && (self.extractor_hidden == 0 || self.extractor_out == 0)
        {
            return bad("extractor widths must be >= 1");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope.is_finite()) {
            return bad("leaky_slope must be positive");
        }
        Ok(())
    }

    /// Channels entering the erasing feature extractor's 1×1 projection.
    pub fn extractor_concat_channels(&self) -> usize {
        let mut c = 0;
        if self.arch.use_prev_image {
            c += self.extractor_out + 3;
        }
        if self.arch.use_context {
            c += self.latent_channels;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Backbone {
    stem: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    context: Conv2d,
    latent: Conv2d,
}

/// One erasing-module parameter set.
#[derive(Clone, Debug, PartialEq)]
struct ErasingLayers {
    image_conv1: Option<Conv2d>,
    image_conv2: Option<Conv2d>,
    project: Option<Conv2d>,
    update_gate: Conv2d,
    reset_gate: Conv2d,
    candidate: Conv2d,
    head: ResidualHead,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ResidualHead {
    hidden: Conv2d,
    out: Conv2d,
}

/// Output of [`extract_features`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput<T> {
    pub context: Tensor<T>,
    pub initial_latent: Tensor<T>,
}

/// Per-iteration state of the recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct ErasingState<T> {
    pub k: usize,
    pub prediction: Tensor<T>,
    pub latent: Tensor<T>,
    pub residual: Tensor<T>,
}

/// Predictions `[I_1 … I_K]` and, for visualization, latents `[l_1 … l_K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub predictions: Vec<Tensor<T>>,
    pub latents: Vec<Tensor<T>>,
}

/// Parameter partition used by [`count_parameters`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    All,
    Backbone,
    ErasingModule,
    /// Head of the no-erasing-module variant.
    DirectHead,
}

impl std::str::FromStr for ParamScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ParamScope::All),
            "backbone" => Ok(ParamScope::Backbone),
            "erasing_module" => Ok(ParamScope::ErasingModule),
            "direct_head" => Ok(ParamScope::DirectHead),
            other => Err(Error::InvalidArgument(format!(
                "unknown parameter scope {other:?} (expected all, backbone, erasing_module or direct_head)"
            ))),
        }
    }
}

/// Network weights together with the configuration they were built for.
///
/// Parameters can only be changed from inside the crate (the optimizer and
/// checkpoint loader), so a forward pass always sees one fixed erasing
/// module.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    erasing: Vec<ErasingLayers>,
    direct_head: Option<ResidualHead>,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Float> Builder<'_, T> {
    /// Weights and biases Uniform(±1/√fan_in).
    fn conv(&mut self, name: &str, group: ParamGroup, c_in: usize, c_out: usize, k: usize) -> Conv2d {
        let fan_in = c_in * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = c_out * fan_in;
        let data: Vec<T> = match self.rng.as_deref_mut() {
            Some(rng) => (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect(),
            None => vec![T::ZERO; n],
        };
        let weight = self.params.push(format!("{name}.weight"), vec![c_out, c_in, k, k], group, data);
        let bias_data: Vec<T> = match self.rng.as_deref_mut() {
            Some(rng) => (0..c_out).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect(),
            None => vec![T::ZERO; c_out],
        };
        let bias = self.params.push(format!("{name}.bias"), vec![c_out], group, bias_data);
        Conv2d {
            weight,
            bias,
            in_channels: c_in,
            out_channels: c_out,
            kernel: k,
        }
    }

    fn head(&mut self, prefix: &str, group: ParamGroup, c_in: usize, cfg: &ModelConfig) -> ResidualHead {
        let k = cfg.kernel_size;
        ResidualHead {
            hidden: self.conv(&format!("{prefix}.hidden"), group, c_in, cfg.head_hidden, k),
            out: self.conv(&format!("{prefix}.out"), group, cfg.head_hidden, 3, k),
        }
    }
}

impl<T: Float> Model<T> {
    /// Random initialization, deterministic per `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    /// Every weight and bias zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { params: &mut params, rng };
        let k = config.kernel_size;
        let d = config.latent_channels;
        let width = config.backbone_width;
        let bb = ParamGroup::Backbone;

        let stem = b.conv("backbone.stem", bb, 4, width, k);
        let blocks = (0..config.num_residual_blocks)
            .map(|i| {
                (
                    b.conv(&format!("backbone.block{i}.conv1"), bb, width, width, k),
                    b.conv(&format!("backbone.block{i}.conv2"), bb, width, width, k),
                )
            })
            .collect();
        let context = b.conv("backbone.context", bb, width, d, 1);
        let latent = b.conv("backbone.latent", bb, width, d, 1);
        let backbone = Backbone {
            stem,
            blocks,
            context,
            latent,
        };

        let mut erasing = Vec::new();
        let mut direct_head = None;
        if config.arch.erasing_module {
            let sets = if config.arch.share_weights { 1 } else { config.iterations };
            for s in 0..sets {
                let prefix = if config.arch.share_weights {
                    "erasing".to_string()
                } else {
                    format!("erasing{s}")
                };
                erasing.push(Self::erasing_layers(&mut b, &prefix, &config));
            }
        } else {
            direct_head = Some(b.head("direct_head", ParamGroup::DirectHead, d, &config));
        }

        Ok(Model {
            config,
            params,
            backbone,
            erasing,
            direct_head,
        })
    }

    fn erasing_layers(b: &mut Builder<'_, T>, prefix: &str, cfg: &ModelConfig) -> ErasingLayers {
        let g = ParamGroup::ErasingModule;
        let k = cfg.kernel_size;
        let d = cfg.latent_channels;
        let (image_conv1, image_conv2) = if cfg.arch.use_prev_image {
            (
                Some(b.conv(&format!("{prefix}.extract.image1"), g, 3, cfg.extractor_hidden, k)),
                Some(b.conv(&format!("{prefix}.extract.image2"), g, cfg.extractor_hidden, cfg.extractor_out, k)),
            )
        } else {
            (None, None)
        };
        let concat = cfg.extractor_concat_channels();
        let project = (concat > 0).then(|| b.conv(&format!("{prefix}.extract.project"), g, concat, d, 1));
        ErasingLayers {
            image_conv1,
            image_conv2,
            project,
            update_gate: b.conv(&format!("{prefix}.gru.update"), g, 2 * d, d, k),
            reset_gate: b.conv(&format!("{prefix}.gru.reset"), g, 2 * d, d, k),
            candidate: b.conv(&format!("{prefix}.gru.candidate"), g, 2 * d, d, k),
            head: b.head(&format!("{prefix}.head"), g, d, cfg),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of distinct erasing-module parameter sets.
    pub fn erasing_sets(&self) -> usize {
        self.erasing.len()
    }

    /// Same architecture, parameters converted to another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            erasing: self.erasing.clone(),
            direct_head: self.direct_head,
        }
    }

    /// Replaces the parameter values, keeping the layout.
    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (want, got) in self.params.iter().zip(params.iter()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        self.params = params;
        Ok(self)
    }

    fn erasing_for(&self, k: usize) -> &ErasingLayers {
        // Unshared models reuse their last set beyond the trained count.
        &self.erasing[(k - 1).min(self.erasing.len() - 1)]
    }

    // ---- graph construction shared by inference and training ----

    pub(crate) fn graph_backbone<G: Graph<T>>(&self, g: &mut G, image: &G::Var, mask: &G::Var) -> (G::Var, G::Var) {
        let x = g.concat(&[image, mask]);
        let mut h = g.conv(&x, &self.backbone.stem, Activation::Relu);
        for (c1, c2) in &self.backbone.blocks {
            let t = g.conv(&h, c1, Activation::Relu);
            let t = g.conv(&t, c2, Activation::Identity);
            h = g.add(&h, &t);
        }
        let context = g.conv(&h, &self.backbone.context, Activation::Relu);
        let latent = g.conv(&h, &self.backbone.latent, Activation::Tanh);
        (context, latent)
    }

    fn graph_extract<G: Graph<T>>(
        &self,
        g: &mut G,
        layers: &ErasingLayers,
        context: &G::Var,
        prev_image: &G::Var,
        like: &G::Var,
    ) -> G::Var {
        let mut parts: Vec<G::Var> = Vec::new();
        if let (Some(c1), Some(c2)) = (&layers.image_conv1, &layers.image_conv2) {
            let t = g.conv(prev_image, c1, Activation::Relu);
            let t = g.conv(&t, c2, Activation::Relu);
            parts.push(t);
            parts.push(prev_image.clone());
        }
        if self.config.arch.use_context {
            parts.push(context.clone());
        }
        match &layers.project {
            Some(p) => {
                let refs: Vec<&G::Var> = parts.iter().collect();
                let cat = g.concat(&refs);
                g.conv(&cat, p, Activation::Relu)
            }
            None => {
                let (_, h, w) = g.value(like).shape();
                g.input(Tensor::zeros(self.config.latent_channels, h, w))
            }
        }
    }

    fn graph_gru<G: Graph<T>>(&self, g: &mut G, layers: &ErasingLayers, latent: &G::Var, feature: &G::Var) -> G::Var {
        let hx = g.concat(&[latent, feature]);
        let update = g.conv(&hx, &layers.update_gate, Activation::Sigmoid);
        let reset = g.conv(&hx, &layers.reset_gate, Activation::Sigmoid);
        let gated = g.mul(&reset, latent);
        let rx = g.concat(&[&gated, feature]);
        let candidate = g.conv(&rx, &layers.candidate, Activation::Tanh);
        g.blend(latent, &update, &candidate)
    }

    fn graph_head<G: Graph<T>>(&self, g: &mut G, head: &ResidualHead, latent: &G::Var) -> G::Var {
        let t = g.conv(latent, &head.hidden, Activation::LeakyRelu(self.config.leaky_slope));
        g.conv(&t, &head.out, Activation::Identity)
    }

    /// Builds the full recurrence. Returns `(predictions, latents, residuals)`.
    #[allow(clippy::type_complexity)]
    pub(crate) fn graph_forward<G: Graph<T>>(
        &self,
        g: &mut G,
        image: &G::Var,
        mask: &G::Var,
        iterations: usize,
    ) -> (Vec<G::Var>, Vec<G::Var>, Vec<G::Var>) {
        let (context, mut latent) = self.graph_backbone(g, image, mask);
        if let Some(head) = &self.direct_head {
            let r = self.graph_head(g, head, &context);
            let pred = g.add_clamp_unit(image, &r);
            return (vec![pred], vec![latent], vec![r]);
        }
        let mut prev = image.clone();
        let mut preds = Vec::with_capacity(iterations);
        let mut latents = Vec::with_capacity(iterations);
        let mut residuals = Vec::with_capacity(iterations);
        for k in 1..=iterations {
            let layers = self.erasing_for(k);
            let f = self.graph_extract(g, layers, &context, &prev, &latent);
            latent = self.graph_gru(g, layers, &latent, &f);
            let r = self.graph_head(g, &layers.head, &latent);
            let pred = match self.config.arch.predict {
                Prediction::Residual => g.add_clamp_unit(image, &r),
                Prediction::Direct => g.clamp_unit(&r),
            };
            prev = pred.clone();
            preds.push(pred);
            latents.push(latent.clone());
            residuals.push(r);
        }
        (preds, latents, residuals)
    }
}

fn check_inputs<T: Float>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("image must have 3 channels, got {}", image.channels())));
    }
    if mask.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("mask must have 1 channel, got {}", mask.channels())));
    }
    if !image.same_spatial(mask) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    if image.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    Ok(())
}

/// Deterministic random initialization.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::init(config, seed)
}

/// Backbone pass producing `E_I` and `l_0` at input resolution.
pub fn extract_features<T: Float>(model: &Model<T>, image: &Tensor<T>, mask: &Tensor<T>) -> Result<BackboneOutput<T>> {
    check_inputs(image, mask)?;
    let mut g = Eager::new(model.params());
    let i = g.input(image.clone());
    let m = g.input(mask.clone());
    let (context, latent) = model.graph_backbone(&mut g, &i, &m);
    Ok(BackboneOutput {
        context: (*context).clone(),
        initial_latent: (*latent).clone(),
    })
}

fn first_erasing<T: Float>(model: &Model<T>) -> Result<&ErasingLayers> {
    model
        .erasing
        .first()
        .ok_or_else(|| Error::InvalidArgument("model has no erasing module".into()))
}

/// Erasing feature extractor `f` from `E_I` and `I_{k-1}`.
pub fn erasing_feature_extract<T: Float>(model: &Model<T>, context: &Tensor<T>, prev_image: &Tensor<T>) -> Result<Tensor<T>> {
    let layers = first_erasing(model)?;
    if !context.same_spatial(prev_image) {
        return Err(Error::ShapeMismatch("context and previous image differ in size".into()));
    }
    let mut g = Eager::new(model.params());
    let c = g.input(context.clone());
    let p = g.input(prev_image.clone());
    let f = model.graph_extract(&mut g, layers, &c, &p, &c);
    Ok((*f).clone())
}

/// Convolutional gated recurrent update of the latent.
pub fn gru_update<T: Float>(model: &Model<T>, latent: &Tensor<T>, feature: &Tensor<T>) -> Result<Tensor<T>> {
    let layers = first_erasing(model)?;
    if latent.shape() != feature.shape() {
        return Err(Error::ShapeMismatch("latent and feature shapes differ".into()));
    }
    let mut g = Eager::new(model.params());
    let l = g.input(latent.clone());
    let f = g.input(feature.clone());
    let out = model.graph_gru(&mut g, layers, &l, &f);
    Ok((*out).clone())
}

/// `conv → LeakyReLU → conv` from the latent to a 3-channel residual.
pub fn residual_head<T: Float>(model: &Model<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
    let layers = first_erasing(model)?;
    let mut g = Eager::new(model.params());
    let l = g.input(latent.clone());
    let r = model.graph_head(&mut g, &layers.head, &l);
    Ok((*r).clone())
}

/// `clamp(I_0 + r, 0, 1)`.
pub fn apply_residual<T: Float>(image: &Tensor<T>, residual: &Tensor<T>) -> Result<Tensor<T>> {
    if image.shape() != residual.shape() {
        return Err(Error::ShapeMismatch("image and residual shapes differ".into()));
    }
    Ok(image.zip_map(residual, |a, b| {
        let s = a + b;
        if s < T::ZERO {
            T::ZERO
        } else if s > T::ONE {
            T::ONE
        } else {
            s
        }
    }))
}

/// Runs the network for `iterations` steps and returns every intermediate
/// prediction and latent. The no-erasing-module variant returns a single
/// prediction regardless of `iterations`.
pub fn forward<T: Float>(model: &Model<T>, image: &Tensor<T>, mask: &Tensor<T>, iterations: usize) -> Result<ForwardOutput<T>> {
    check_inputs(image, mask)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut g = Eager::new(model.params());
    let i = g.input(image.clone());
    let m = g.input(mask.clone());
    let (preds, latents, _) = model.graph_forward(&mut g, &i, &m, iterations);
    Ok(ForwardOutput {
        predictions: preds.into_iter().map(|p| (*p).clone()).collect(),
        latents: latents.into_iter().map(|l| (*l).clone()).collect(),
    })
}

/// Forward pass that also exposes residuals, as [`ErasingState`]s.
pub fn forward_states<T: Float>(model: &Model<T>, image: &Tensor<T>, mask: &Tensor<T>, iterations: usize) -> Result<Vec<ErasingState<T>>> {
    check_inputs(image, mask)?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut g = Eager::new(model.params());
    let i = g.input(image.clone());
    let m = g.input(mask.clone());
    let (preds, latents, residuals) = model.graph_forward(&mut g, &i, &m, iterations);
    Ok(preds
        .into_iter()
        .zip(latents)
        .zip(residuals)
        .enumerate()
        .map(|(idx, ((p, l), r))| ErasingState {
            k: idx + 1,
            prediction: (*p).clone(),
            latent: (*l).clone(),
            residual: (*r).clone(),
        })
        .collect())
}

/// Exact count of scalar parameters in `scope`.
pub fn count_parameters<T: Float>(model: &Model<T>, scope: ParamScope) -> usize {
    model
        .params()
        .iter()
        .filter(|p| match scope {
            ParamScope::All => true,
            ParamScope::Backbone => p.group == ParamGroup::Backbone,
            ParamScope::ErasingModule => p.group == ParamGroup::ErasingModule,
            ParamScope::DirectHead => p.group == ParamGroup::DirectHead,
        })
        .map(|p| p.numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_channels: 4,
            backbone_width: 6,
            num_residual_blocks: 2,
            iterations: 3,
            head_hidden: 5,
            extractor_hidden: 3,
            extractor_out: 4,
            ..ModelConfig::default()
        }
    }

    fn ramp(c: usize, h: usize, w: usize, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 11.0 * scale)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Model::<f32>::init(tiny(), 9).unwrap();
        let b = Model::<f32>::init(tiny(), 9).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::<f32>::init(tiny(), 10).unwrap();
        assert_ne!(a.params(), c.params());
        let params: Vec<_> = a.params().iter().collect();
        for pair in params.chunks(2) {
            let (w, b) = (pair[0], pair[1]);
            assert!(w.name.ends_with(".weight") && b.name.ends_with(".bias"));
            let fan_in: usize = w.shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f32).sqrt();
            for v in w.data.iter().chain(&b.data) {
                assert!(v.abs() <= bound * 1.0001, "{}", w.name);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ModelConfig { kernel_size: 4, ..tiny() },
            ModelConfig { latent_channels: 0, ..tiny() },
            ModelConfig { iterations: 0, ..tiny() },
        ] {
            assert!(Model::<f32>::init(cfg, 0).is_err());
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        let img = ramp(3, 7, 5, 1.0);
        let mask = ramp(1, 7, 5, 1.0);
        let out = extract_features(&m, &img, &mask).unwrap();
        assert_eq!(out.context.shape(), (4, 7, 5));
        assert_eq!(out.initial_latent.shape(), (4, 7, 5));
        assert!(out.initial_latent.data().iter().all(|v| v.abs() < 1.0));
        let img2 = ramp(3, 14, 5, 1.0);
        let mask2 = ramp(1, 14, 5, 1.0);
        let out2 = extract_features(&m, &img2, &mask2).unwrap();
        assert_eq!(out2.context.shape(), (4, 14, 5));
    }

    #[test]
    fn mismatched_inputs_error() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        assert!(extract_features(&m, &ramp(3, 4, 4, 1.0), &ramp(1, 4, 5, 1.0)).is_err());
        assert!(extract_features(&m, &ramp(2, 4, 4, 1.0), &ramp(1, 4, 4, 1.0)).is_err());
        assert!(forward(&m, &ramp(3, 4, 4, 1.0), &ramp(1, 4, 4, 1.0), 0).is_err());
    }

    #[test]
    fn zero_weights_are_inert() {
        let m = Model::<f64>::zeroed(tiny()).unwrap();
        let img = ramp(3, 6, 6, 1.0);
        let mask = ramp(1, 6, 6, 1.0);
        let bb = extract_features(&m, &img, &mask).unwrap();
        assert!(bb.initial_latent.data().iter().all(|&v| v == 0.0));
        let f = erasing_feature_extract(&m, &bb.context, &img).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let l_prev = ramp(4, 6, 6, 1.8).map(|v| v - 0.9);
        let l = gru_update(&m, &l_prev, &f).unwrap();
        for (a, b) in l.data().iter().zip(l_prev.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let r = residual_head(&m, &l).unwrap();
        assert_eq!(r.shape(), (3, 6, 6));
        assert!(r.data().iter().all(|&v| v == 0.0));
        let out = forward(&m, &img, &mask, 4).unwrap();
        assert_eq!(out.predictions.len(), 4);
        for p in &out.predictions {
            assert_eq!(p, &img);
        }
    }

    #[test]
    fn apply_residual_clamps_and_anchors() {
        let img = Tensor::<f64>::filled(3, 2, 2, 0.5);
        assert_eq!(apply_residual(&img, &Tensor::zeros(3, 2, 2)).unwrap(), img);
        let up = apply_residual(&img, &Tensor::filled(3, 2, 2, 1.0)).unwrap();
        assert!(up.data().iter().all(|&v| v == 1.0));
        let down = apply_residual(&img, &Tensor::filled(3, 2, 2, -2.0)).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prefix_property_of_recurrence() {
        let m = Model::<f32>::init(tiny(), 3).unwrap();
        let img = ramp(3, 8, 8, 1.0).cast::<f32>();
        let mask = ramp(1, 8, 8, 1.0).cast::<f32>();
        let one = forward(&m, &img, &mask, 1).unwrap();
        let eight = forward(&m, &img, &mask, 8).unwrap();
        assert_eq!(one.predictions[0], eight.predictions[0]);
        assert_eq!(eight.predictions.len(), 8);
        let again = forward(&m, &img, &mask, 8).unwrap();
        assert_eq!(eight, again);
    }

    #[test]
    fn states_expose_residual_anchor() {
        let m = Model::<f64>::init(tiny(), 5).unwrap();
        let img = ramp(3, 6, 6, 1.0);
        let mask = ramp(1, 6, 6, 1.0);
        for s in forward_states(&m, &img, &mask, 3).unwrap() {
            assert_eq!(s.prediction, apply_residual(&img, &s.residual).unwrap());
        }
    }

    #[test]
    fn parameter_scopes_partition_total() {
        for arch in [
            Architecture::default(),
            Architecture { erasing_module: false, ..Architecture::default() },
            Architecture { share_weights: false, ..Architecture::default() },
            Architecture { use_context: false, ..Architecture::default() },
            Architecture { use_prev_image: false, ..Architecture::default() },
        ] {
            let m = Model::<f32>::init(ModelConfig { arch, ..tiny() }, 0).unwrap();
            let all = count_parameters(&m, ParamScope::All);
            let parts = count_parameters(&m, ParamScope::Backbone)
                + count_parameters(&m, ParamScope::ErasingModule)
                + count_parameters(&m, ParamScope::DirectHead);
            assert_eq!(all, parts);
            assert_eq!(all, m.params().total_numel());
        }
        assert!("everything".parse::<ParamScope>().is_err());
    }

    #[test]
    fn unshared_weights_multiply_erasing_parameters() {
        let shared = Model::<f32>::init(tiny(), 0).unwrap();
        let cfg = ModelConfig {
            arch: Architecture { share_weights: false, ..Architecture::default() },
            ..tiny()
        };
        let unshared = Model::<f32>::init(cfg, 0).unwrap();
        assert_eq!(shared.erasing_sets(), 1);
        assert_eq!(unshared.erasing_sets(), 3);
        assert_eq!(
            count_parameters(&unshared, ParamScope::ErasingModule),
            3 * count_parameters(&shared, ParamScope::ErasingModule)
        );
    }

    #[test]
    fn direct_head_variant_emits_one_prediction() {
        let cfg = ModelConfig {
            arch: Architecture { erasing_module: false, ..Architecture::default() },
            ..tiny()
        };
        let m = Model::<f64>::init(cfg, 2).unwrap();
        let out = forward(&m, &ramp(3, 5, 5, 1.0), &ramp(1, 5, 5, 1.0), 8).unwrap();
        assert_eq!(out.predictions.len(), 1);
        assert!(gru_update(&m, &ramp(4, 5, 5, 0.5), &ramp(4, 5, 5, 0.5)).is_err());
    }
}
