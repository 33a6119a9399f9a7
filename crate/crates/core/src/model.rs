//! Masked-convolution autoregressive image model.
//!
//! Layout: a type-A masked convolution over the raw image, a stack of
//! residual blocks (1x1 reduce, type-B masked 3x3, 1x1 expand, skip add),
//! two pointwise layers and a pointwise head producing per-pixel
//! distribution parameters. Pixel `i` of the output depends only on input
//! pixels strictly before `i` in raster order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    categorical_nll_with_grad, min_log_scale, mixture_nll_with_grad, NllReport, PixelHead,
    Quantizer,
};
use crate::numerics::{ConvPlan, ParamSet, Real, Tape, Tensor, Var};

/// Mixture means are `MEAN_CENTER + MEAN_CENTER * raw`, so a zero head sits
/// in the middle of the intensity range.
pub const MEAN_CENTER: f64 = 127.5;

/// Offset added to the raw log-scale output (scale 127.5 at zero).
pub fn log_scale_offset() -> f64 {
    MEAN_CENTER.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Hides the center tap.
    A,
    /// Keeps the center tap.
    B,
}

/// Binary (kh, kw) mask: taps before the center in raster order are 1; the
/// center is 1 only for type B; everything after is 0.
pub fn build_mask<T: Real>(kh: usize, kw: usize, kind: MaskKind) -> Result<Tensor<T>> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("mask dims ({kh}, {kw}) must be odd")));
    }
    let (cr, cc) = (kh / 2, kw / 2);
    Ok(Tensor::from_fn(&[kh, kw], |i| {
        let (r, c) = (i / kw, i % kw);
        let visible = r < cr || (r == cr && c < cc) || (kind == MaskKind::B && r == cr && c == cc);
        if visible {
            T::one()
        } else {
            T::zero()
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Categorical { num_categories: usize },
    LogisticMixture { num_components: usize },
}

impl HeadKind {
    /// Channels produced by the final pointwise layer.
    pub fn channels(&self) -> usize {
        match *self {
            HeadKind::Categorical { num_categories } => num_categories,
            HeadKind::LogisticMixture { num_components } => 3 * num_components,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub num_resnet: usize,
    pub num_filters: usize,
    /// (visible rows, kernel columns) of the first layer.
    pub receptive_field: (usize, usize),
    pub dropout_p: f64,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 48,
            image_w: 192,
            channels: 1,
            num_resnet: 3,
            num_filters: 32,
            receptive_field: (5, 7),
            dropout_p: 0.3,
            head: HeadKind::LogisticMixture { num_components: 1 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.image_h == 0 || self.image_w == 0 {
            return bad(format!("image dims {}x{} must be positive", self.image_w, self.image_h));
        }
        if self.channels != 1 {
            return bad(format!("only single-channel images are supported, got {}", self.channels));
        }
        let (rows, cols) = self.receptive_field;
        if rows == 0 {
            return bad("receptive field rows must be at least 1".into());
        }
        if cols % 2 == 0 {
            return bad(format!("receptive field cols {cols} must be odd"));
        }
        if self.num_filters < 2 || self.num_filters % 2 == 1 {
            return bad(format!("num_filters {} must be even and at least 2", self.num_filters));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        match self.head {
            HeadKind::Categorical { num_categories } if !(2..=256).contains(&num_categories) => {
                bad(format!("num_categories {num_categories} outside 2..=256"))
            }
            HeadKind::LogisticMixture { num_components } if num_components == 0 => {
                bad("num_components must be at least 1".into())
            }
            _ => Ok(()),
        }
    }

    /// First field that differs from `other`, if any.
    pub fn mismatched_field(&self, other: &ModelConfig) -> Option<&'static str> {
        if self.image_h != other.image_h {
            Some("image_h")
        } else if self.image_w != other.image_w {
            Some("image_w")
        } else if self.channels != other.channels {
            Some("channels")
        } else if self.num_resnet != other.num_resnet {
            Some("num_resnet")
        } else if self.num_filters != other.num_filters {
            Some("num_filters")
        } else if self.receptive_field != other.receptive_field {
            Some("receptive_field")
        } else if self.dropout_p.to_bits() != other.dropout_p.to_bits() {
            Some("dropout_p")
        } else if self.head != other.head {
            Some("head")
        } else {
            None
        }
    }

    pub fn first_kernel(&self) -> (usize, usize) {
        (2 * self.receptive_field.0 - 1, self.receptive_field.1)
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w
    }
}

/// Forward-pass mode. Dropout only runs in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Per-pixel head parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelDistribution<T: Real = f32> {
    Categorical {
        logits: Tensor<T>,
        quantizer: Quantizer,
    },
    LogisticMixture {
        logits: Tensor<T>,
        means: Tensor<T>,
        /// Already clamped to at least `ln(1e-3)`.
        log_scales: Tensor<T>,
    },
}

impl<T: Real> PixelDistribution<T> {
    /// Parameters at flat pixel index `p` (batch-major raster order).
    pub fn pixel(&self, p: usize) -> PixelHead<'_, T> {
        match self {
            PixelDistribution::Categorical { logits, quantizer } => {
                let k = logits.channels();
                PixelHead::Categorical {
                    logits: &logits.data()[p * k..(p + 1) * k],
                    quantizer: *quantizer,
                }
            }
            PixelDistribution::LogisticMixture {
                logits,
                means,
                log_scales,
            } => {
                let m = logits.channels();
                let r = p * m..(p + 1) * m;
                PixelHead::LogisticMixture {
                    logits: &logits.data()[r.clone()],
                    means: &means.data()[r.clone()],
                    log_scales: &log_scales.data()[r],
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            PixelDistribution::Categorical { logits, .. } => logits.all_finite(),
            PixelDistribution::LogisticMixture {
                logits,
                means,
                log_scales,
            } => logits.all_finite() && means.all_finite() && log_scales.all_finite(),
        }
    }
}

/// Owned decoded head values for one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPixel<T: Real = f32> {
    head: HeadKind,
    logits: Vec<T>,
    means: Vec<T>,
    log_scales: Vec<T>,
}

impl<T: Real> DecodedPixel<T> {
    pub fn head(&self) -> PixelHead<'_, T> {
        match self.head {
            HeadKind::Categorical { num_categories } => PixelHead::Categorical {
                logits: &self.logits,
                quantizer: Quantizer::new(num_categories).expect("validated config"),
            },
            HeadKind::LogisticMixture { .. } => PixelHead::LogisticMixture {
                logits: &self.logits,
                means: &self.means,
                log_scales: &self.log_scales,
            },
        }
    }
}

#[inline]
fn decode_mean<T: Real>(raw: T) -> T {
    T::of(MEAN_CENTER + MEAN_CENTER * raw.f64())
}

#[inline]
fn decode_log_scale<T: Real>(raw: T) -> T {
    T::of(raw.f64() + log_scale_offset())
}

/// Converts 8-bit pixels to the model's input scale `v / 255`.
pub fn scale_pixels<T: Real>(pixels: &[u8], batch: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    Tensor::new(
        vec![batch, h, w, 1],
        pixels.iter().map(|&v| scale_pixel(v)).collect(),
    )
}

#[inline]
pub(crate) fn scale_pixel<T: Real>(v: u8) -> T {
    T::of(v as f64 / 255.0)
}

/// Parameter names of residual block `i`.
pub(crate) struct BlockNames {
    pub reduce: (String, String),
    pub masked: (String, String),
    pub expand: (String, String),
}

pub(crate) fn kb(prefix: &str) -> (String, String) {
    (format!("{prefix}.kernel"), format!("{prefix}.bias"))
}

pub(crate) fn block_names(i: usize) -> BlockNames {
    BlockNames {
        reduce: kb(&format!("res{i}.reduce")),
        masked: kb(&format!("res{i}.masked")),
        expand: kb(&format!("res{i}.expand")),
    }
}

pub(crate) const POST_LAYERS: usize = 2;

/// Precomputed convolution plans for every layer of a configuration.
#[derive(Clone, Debug)]
pub(crate) struct Plans {
    pub input: ConvPlan,
    pub reduce: ConvPlan,
    pub masked: ConvPlan,
    pub expand: ConvPlan,
    pub post: ConvPlan,
    pub head: ConvPlan,
}

#[derive(Clone, Debug)]
pub struct PixelCnn {
    config: ModelConfig,
    pub(crate) plans: Plans,
}

impl PixelCnn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let f = config.num_filters;
        let half = f / 2;
        let (kh, kw) = config.first_kernel();
        let mask_a = build_mask::<f32>(kh, kw, MaskKind::A)?;
        let mask_b = build_mask::<f32>(3, 3, MaskKind::B)?;
        let plans = Plans {
            input: ConvPlan::new(&[kh, kw, 1, f], Some(&mask_a))?,
            reduce: ConvPlan::new::<f32>(&[1, 1, f, half], None)?,
            masked: ConvPlan::new(&[3, 3, half, half], Some(&mask_b))?,
            expand: ConvPlan::new::<f32>(&[1, 1, half, f], None)?,
            post: ConvPlan::new::<f32>(&[1, 1, f, f], None)?,
            head: ConvPlan::new::<f32>(&[1, 1, f, config.head.channels()], None)?,
        };
        Ok(PixelCnn { config, plans })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// (name, kernel shape, mask) for every convolution, in parameter order.
    fn layers(&self) -> Vec<(String, [usize; 4], Option<Tensor<f32>>)> {
        let cfg = &self.config;
        let f = cfg.num_filters;
        let half = f / 2;
        let (kh, kw) = cfg.first_kernel();
        let mut out = vec![(
            "input".to_string(),
            [kh, kw, 1, f],
            Some(build_mask(kh, kw, MaskKind::A).expect("odd dims")),
        )];
        for i in 0..cfg.num_resnet {
            out.push((format!("res{i}.reduce"), [1, 1, f, half], None));
            out.push((
                format!("res{i}.masked"),
                [3, 3, half, half],
                Some(build_mask(3, 3, MaskKind::B).expect("odd dims")),
            ));
            out.push((format!("res{i}.expand"), [1, 1, half, f], None));
        }
        for j in 0..POST_LAYERS {
            out.push((format!("post{j}"), [1, 1, f, f], None));
        }
        out.push(("head".to_string(), [1, 1, f, cfg.head.channels()], None));
        out
    }

    /// Spatial masks of the masked layers, keyed by kernel parameter name.
    pub fn kernel_masks(&self) -> Vec<(String, Tensor<f32>)> {
        self.layers()
            .into_iter()
            .filter_map(|(name, _, mask)| mask.map(|m| (format!("{name}.kernel"), m)))
            .collect()
    }

    /// Deterministic initialization: kernels uniform in ±sqrt(6 / fan_in)
    /// over unmasked taps, masked taps and biases zero, head all zeros (a
    /// uniform categorical head / a broad centered logistic).
    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        self.init_inner(seed, false)
    }

    /// Like [`PixelCnn::init_params`] but with a random head and random
    /// biases, for exercising every layer in tests.
    pub fn random_params(&self, seed: u64) -> ParamSet<f32> {
        self.init_inner(seed, true)
    }

    fn init_inner(&self, seed: u64, everything: bool) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, mask) in self.layers() {
            let [kh, kw, ci, co] = shape;
            let active = mask
                .as_ref()
                .map_or(kh * kw, |m| m.data().iter().filter(|&&v| v != 0.0).count());
            let bound = (6.0 / (active * ci) as f64).sqrt();
            let zero = name == "head" && !everything;
            let kernel = Tensor::from_fn(&shape, |i| {
                let tap = i / (ci * co);
                let visible = mask.as_ref().map_or(true, |m| m.data()[tap] != 0.0);
                if zero || !visible {
                    0.0
                } else {
                    rng.gen_range(-bound..bound) as f32
                }
            });
            let bias = Tensor::from_fn(&[co], |_| {
                if everything {
                    rng.gen_range(-0.1..0.1)
                } else {
                    0.0
                }
            });
            let (kn, bn) = kb(&name);
            params.insert(kn, kernel);
            params.insert(bn, bias);
        }
        params
    }

    pub(crate) fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        for (name, shape, _) in self.layers() {
            let (kn, bn) = kb(&name);
            let k = params.require(&kn)?;
            if k.shape() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{kn}` has shape {:?}, config needs {shape:?}",
                    k.shape()
                )));
            }
            if params.require(&bn)?.shape() != [shape[3]] {
                return Err(Error::Shape(format!("parameter `{bn}` has wrong shape")));
            }
        }
        Ok(())
    }

    fn conv<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        names: &(String, String),
        plan: &ConvPlan,
    ) -> Result<Var> {
        let k = tape.param(params, &names.0)?;
        let b = tape.param(params, &names.1)?;
        tape.conv_with_plan(x, k, b, plan.clone())
    }

    /// `x + expand(relu(masked_b(relu(reduce(x)))))`.
    pub fn residual_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        index: usize,
    ) -> Result<Var> {
        let f = tape.value(x).channels();
        if f % 2 == 1 {
            return Err(Error::Shape(format!(
                "residual block needs an even channel count, got {f}"
            )));
        }
        if f != self.config.num_filters {
            return Err(Error::Shape(format!(
                "residual block input has {f} channels, config has {}",
                self.config.num_filters
            )));
        }
        let names = block_names(index);
        let h = self.conv(tape, params, x, &names.reduce, &self.plans.reduce)?;
        let h = tape.relu(h);
        let h = self.conv(tape, params, h, &names.masked, &self.plans.masked)?;
        let h = tape.relu(h);
        let h = self.conv(tape, params, h, &names.expand, &self.plans.expand)?;
        tape.add(x, h)
    }

    /// Records the whole network on `tape` and returns the raw head output
    /// (N, H, W, head channels). `images` must already be scaled to [0, 1].
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        images: Tensor<T>,
        mut mode: Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.image_h || s[2] != cfg.image_w || s[3] != 1 {
            return Err(Error::Shape(format!(
                "images have shape {s:?}, config needs (N, {}, {}, 1)",
                cfg.image_h, cfg.image_w
            )));
        }
        self.check_params(params)?;
        let x = tape.constant(images);
        let x = self.conv(tape, params, x, &kb("input"), &self.plans.input)?;
        let mut x = tape.relu(x);
        for i in 0..cfg.num_resnet {
            x = self.residual_block(tape, params, x, i)?;
            if let Mode::Train(rng) = &mut mode {
                if cfg.dropout_p > 0.0 {
                    let keep = 1.0 - cfg.dropout_p;
                    let inv = T::of(1.0 / keep);
                    let shape = tape.value(x).shape().to_vec();
                    let mask = Tensor::from_fn(&shape, |_| {
                        if rng.gen::<f64>() < keep {
                            inv
                        } else {
                            T::zero()
                        }
                    });
                    let m = tape.constant(mask);
                    x = tape.mul(x, m)?;
                }
            }
        }
        for j in 0..POST_LAYERS {
            x = self.conv(tape, params, x, &kb(&format!("post{j}")), &self.plans.post)?;
            x = tape.relu(x);
        }
        self.conv(tape, params, x, &kb("head"), &self.plans.head)
    }

    /// Eval-mode forward pass on 8-bit images, returning the raw head output.
    pub fn head_output(&self, params: &ParamSet<f32>, pixels: &[u8], batch: usize) -> Result<Tensor<f32>> {
        let cfg = &self.config;
        if pixels.len() != batch * cfg.pixels() {
            return Err(Error::Shape(format!(
                "{} pixels for a batch of {batch} {}x{} images",
                pixels.len(),
                cfg.image_w,
                cfg.image_h
            )));
        }
        let images = scale_pixels(pixels, batch, cfg.image_h, cfg.image_w)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, images, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode distribution for a batch of 8-bit images.
    pub fn predict(&self, params: &ParamSet<f32>, pixels: &[u8], batch: usize) -> Result<PixelDistribution> {
        let raw = self.head_output(params, pixels, batch)?;
        Ok(self.distribution(&raw))
    }

    /// Splits raw head output into distribution parameters.
    pub fn distribution<T: Real>(&self, raw: &Tensor<T>) -> PixelDistribution<T> {
        match self.config.head {
            HeadKind::Categorical { num_categories } => PixelDistribution::Categorical {
                logits: raw.clone(),
                quantizer: Quantizer::new(num_categories).expect("validated config"),
            },
            HeadKind::LogisticMixture { num_components: m } => {
                let (logits, means, log_scales) = split_mixture(raw, m, true);
                PixelDistribution::LogisticMixture {
                    logits,
                    means,
                    log_scales,
                }
            }
        }
    }

    /// Decodes one pixel's raw head values.
    pub fn decode_pixel<T: Real>(&self, raw: &[T]) -> DecodedPixel<T> {
        match self.config.head {
            HeadKind::Categorical { .. } => DecodedPixel {
                head: self.config.head,
                logits: raw.to_vec(),
                means: Vec::new(),
                log_scales: Vec::new(),
            },
            HeadKind::LogisticMixture { num_components: m } => {
                let floor = T::of(min_log_scale());
                DecodedPixel {
                    head: self.config.head,
                    logits: raw[..m].to_vec(),
                    means: raw[m..2 * m].iter().map(|&r| decode_mean(r)).collect(),
                    log_scales: raw[2 * m..]
                        .iter()
                        .map(|&r| decode_log_scale(r).max(floor))
                        .collect(),
                }
            }
        }
    }

    /// Negative log-likelihood of `targets` (8-bit pixels, same layout as the
    /// head output) under the raw head values.
    pub fn nll<T: Real>(&self, raw: &Tensor<T>, targets: &[u8]) -> Result<NllReport> {
        self.nll_with_grad(raw, targets).map(|(r, _)| r)
    }

    /// NLL and its gradient (of the total nats) with respect to the raw head.
    pub fn nll_with_grad<T: Real>(&self, raw: &Tensor<T>, targets: &[u8]) -> Result<(NllReport, Tensor<T>)> {
        match self.config.head {
            HeadKind::Categorical { num_categories } => {
                let q = Quantizer::new(num_categories)?;
                let bins: Vec<usize> = targets.iter().map(|&v| q.bin_of(v)).collect();
                categorical_nll_with_grad(raw, &bins)
            }
            HeadKind::LogisticMixture { num_components: m } => {
                let (logits, means, log_scales) = split_mixture(raw, m, false);
                let (report, g) = mixture_nll_with_grad(&logits, &means, &log_scales, targets)?;
                let mut grad = vec![T::zero(); raw.len()];
                for (p, dst) in grad.chunks_mut(3 * m).enumerate() {
                    for j in 0..m {
                        let i = p * m + j;
                        dst[j] = g.logits.data()[i];
                        dst[m + j] = T::of(g.means.data()[i].f64() * MEAN_CENTER);
                        dst[2 * m + j] = g.log_scales.data()[i];
                    }
                }
                Ok((report, Tensor::new(raw.shape().to_vec(), grad)?))
            }
        }
    }

    /// Records the mean bits/dim of `targets` as a scalar loss on `tape`.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, head: Var, targets: &[u8]) -> Result<(Var, NllReport)> {
        let (report, grad) = self.nll_with_grad(tape.value(head), targets)?;
        let k = 1.0 / (report.pixel_count as f64 * std::f64::consts::LN_2);
        let grad = grad.map(|g| T::of(g.f64() * k));
        let loss = tape.fused_scalar(head, report.bits_per_dim, grad)?;
        Ok((loss, report))
    }
}

/// (logits, means, log_scales) from interleaved raw head channels
/// `[logits | means | log_scales]`.
fn split_mixture<T: Real>(raw: &Tensor<T>, m: usize, clamp: bool) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let pixels = raw.len() / (3 * m);
    let mut shape = raw.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = m;
    let floor = T::of(min_log_scale());
    let mut logits = Vec::with_capacity(pixels * m);
    let mut means = Vec::with_capacity(pixels * m);
    let mut scales = Vec::with_capacity(pixels * m);
    for px in raw.data().chunks(3 * m) {
        logits.extend_from_slice(&px[..m]);
        means.extend(px[m..2 * m].iter().map(|&r| decode_mean(r)));
        scales.extend(px[2 * m..].iter().map(|&r| {
            let s = decode_log_scale(r);
            if clamp {
                s.max(floor)
            } else {
                s
            }
        }));
    }
    (
        Tensor::new(shape.clone(), logits).expect("split shape"),
        Tensor::new(shape.clone(), means).expect("split shape"),
        Tensor::new(shape, scales).expect("split shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error};

    fn small_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            image_h: 6,
            image_w: 7,
            num_resnet: 1,
            num_filters: 4,
            receptive_field: (2, 3),
            dropout_p: 0.0,
            head,
            ..ModelConfig::default()
        }
    }

    fn random_pixels(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen()).collect()
    }

    #[test]
    fn masks_match_figure() {
        let a = build_mask::<f32>(3, 3, MaskKind::A).unwrap();
        assert_eq!(a.data(), &[1., 1., 1., 1., 0., 0., 0., 0., 0.]);
        let b = build_mask::<f32>(3, 3, MaskKind::B).unwrap();
        assert_eq!(b.data(), &[1., 1., 1., 1., 1., 0., 0., 0., 0.]);
        assert_eq!(build_mask::<f32>(1, 1, MaskKind::A).unwrap().data(), &[0.]);
        assert_eq!(build_mask::<f32>(1, 1, MaskKind::B).unwrap().data(), &[1.]);
        assert!(build_mask::<f32>(2, 3, MaskKind::A).is_err());
    }

    #[test]
    fn mask_a_plus_center_is_mask_b() {
        for kh in [1, 3, 5, 9] {
            for kw in [1, 3, 7] {
                let a = build_mask::<f32>(kh, kw, MaskKind::A).unwrap();
                let b = build_mask::<f32>(kh, kw, MaskKind::B).unwrap();
                let center = (kh / 2) * kw + kw / 2;
                for i in 0..kh * kw {
                    let ind = if i == center { 1.0 } else { 0.0 };
                    assert_eq!(a.data()[i] + ind, b.data()[i]);
                }
            }
        }
    }

    #[test]
    fn masked_conv_counts_visible_taps() {
        use crate::numerics::masked_conv2d_same;
        let x = Tensor::<f32>::full(&[1, 5, 5, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        for (kind, expect) in [(MaskKind::A, 4.0), (MaskKind::B, 5.0)] {
            let m = build_mask(3, 3, kind).unwrap();
            let out = masked_conv2d_same(&x, &k, &b, &m).unwrap();
            assert_eq!(out.data()[2 * 5 + 2], expect);
        }
    }

    #[test]
    fn masked_weights_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::from_fn(&[2, 5, 6, 2], |_| rng.gen_range(-1.0..1.0)));
        p.insert("k", Tensor::from_fn(&[3, 3, 2, 3], |_| rng.gen_range(-1.0..1.0)));
        p.insert("b", Tensor::zeros(&[3]));
        p.insert("w", Tensor::from_fn(&[2, 5, 6, 3], |_| rng.gen_range(-1.0..1.0)));
        for kind in [MaskKind::A, MaskKind::B] {
            let mask = build_mask(3, 3, kind).unwrap();
            let mut tape = Tape::new();
            let x = tape.param(&p, "x").unwrap();
            let k = tape.param(&p, "k").unwrap();
            let b = tape.param(&p, "b").unwrap();
            let w = tape.param(&p, "w").unwrap();
            let c = tape.masked_conv2d_same(x, k, b, &mask).unwrap();
            let m = tape.mul(c, w).unwrap();
            let loss = tape.sum(m);
            let g = tape.backward(loss, &p).unwrap();
            let gk = g.get("k").unwrap();
            for (i, &v) in gk.data().iter().enumerate() {
                if mask.data()[i / 6] == 0.0 {
                    assert_eq!(v, 0.0);
                }
            }
            assert!(gk.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn default_output_shape() {
        let cfg = ModelConfig {
            head: HeadKind::Categorical { num_categories: 256 },
            ..ModelConfig::default()
        };
        let model = PixelCnn::new(cfg).unwrap();
        let params = model.init_params(0);
        let raw = model.head_output(&params, &vec![200u8; 2 * 48 * 192], 2).unwrap();
        assert_eq!(raw.shape(), &[2, 48, 192, 256]);
    }

    #[test]
    fn first_pixel_ignores_input() {
        let model = PixelCnn::new(small_config(HeadKind::Categorical { num_categories: 16 })).unwrap();
        let params = model.random_params(3);
        let n = 6 * 7;
        let a = model.head_output(&params, &random_pixels(n, 1), 1).unwrap();
        let b = model.head_output(&params, &random_pixels(n, 2), 1).unwrap();
        assert_eq!(a.data()[..16], b.data()[..16]);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn causality_exhaustive_on_small_grid() {
        for head in [
            HeadKind::Categorical { num_categories: 4 },
            HeadKind::LogisticMixture { num_components: 2 },
        ] {
            let model = PixelCnn::new(small_config(head)).unwrap();
            let params = model.random_params(11);
            let n = 6 * 7;
            let c = head.channels();
            let base_px = random_pixels(n, 5);
            let base = model.head_output(&params, &base_px, 1).unwrap();
            let mut influenced = 0;
            for j in 0..n {
                let mut px = base_px.clone();
                px[j] = px[j].wrapping_add(97);
                let out = model.head_output(&params, &px, 1).unwrap();
                for i in 0..=j {
                    let (a, b) = (&base.data()[i * c..(i + 1) * c], &out.data()[i * c..(i + 1) * c]);
                    assert!(
                        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                        "pixel {i} changed after perturbing {j}"
                    );
                }
                if out.data()[(j + 1) * c..] != base.data()[(j + 1) * c..] {
                    influenced += 1;
                }
            }
            // later pixels do see earlier ones
            assert!(influenced > n / 2, "{influenced}");
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let model = PixelCnn::new(small_config(HeadKind::Categorical { num_categories: 4 })).unwrap();
        let mut params = model.random_params(1);
        for (name, t) in params.iter_mut() {
            if name.starts_with("res0.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::from_fn(&[2, 6, 7, 4], |_| rng.gen_range(-2.0f32..2.0));
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = model.residual_block(&mut tape, &params, x, 0).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn residual_block_rejects_odd_channels() {
        let model = PixelCnn::new(small_config(HeadKind::Categorical { num_categories: 4 })).unwrap();
        let params = model.random_params(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 7, 3]));
        assert!(model.residual_block(&mut tape, &params, x, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_respects_masks() {
        let model = PixelCnn::new(ModelConfig::default()).unwrap();
        let a = model.init_params(42);
        assert_eq!(a, model.init_params(42));
        assert_ne!(a, model.init_params(43));
        for (name, mask) in model.kernel_masks() {
            let k = a.get(&name).unwrap();
            let per_tap = k.len() / mask.len();
            for (i, &v) in k.data().iter().enumerate() {
                if mask.data()[i / per_tap] == 0.0 {
                    assert_eq!(v, 0.0, "{name}[{i}]");
                }
            }
        }
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let model = PixelCnn::new(small_config(HeadKind::LogisticMixture { num_components: 3 })).unwrap();
        let params = model.random_params(9);
        let px = random_pixels(2 * 42, 4);
        let d1 = model.predict(&params, &px, 2).unwrap();
        let d2 = model.predict(&params, &px, 2).unwrap();
        assert!(d1.all_finite());
        assert_eq!(d1, d2);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = PixelCnn::new(small_config(HeadKind::Categorical { num_categories: 4 })).unwrap();
        let params = model.init_params(0);
        let mut tape = Tape::new();
        let err = model.forward(&mut tape, &params, Tensor::zeros(&[1, 5, 7, 1]), Mode::Eval);
        assert!(err.is_err());
        assert!(model.head_output(&params, &[0u8; 10], 1).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::default();
        assert!(ok.validate().is_ok());
        let cases = [
            ModelConfig { receptive_field: (5, 6), ..ok.clone() },
            ModelConfig { receptive_field: (0, 7), ..ok.clone() },
            ModelConfig { num_filters: 7, ..ok.clone() },
            ModelConfig { head: HeadKind::Categorical { num_categories: 1 }, ..ok.clone() },
            ModelConfig { head: HeadKind::LogisticMixture { num_components: 0 }, ..ok.clone() },
            ModelConfig { dropout_p: 1.0, ..ok.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let other = ModelConfig { num_filters: 16, ..ok.clone() };
        assert_eq!(ok.mismatched_field(&other), Some("num_filters"));
    }

    /// Two masked layers, f64 throughout, checked against central differences.
    #[test]
    fn masked_stack_gradient_matches_finite_differences() {
        let mask_a = build_mask::<f64>(3, 3, MaskKind::A).unwrap();
        let mask_b = build_mask::<f64>(3, 3, MaskKind::B).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = ParamSet::<f64>::new();
        p.insert("k1", Tensor::from_fn(&[3, 3, 1, 3], |_| rng.gen_range(-1.0..1.0)));
        p.insert("b1", Tensor::from_fn(&[3], |_| rng.gen_range(-0.2..0.2)));
        p.insert("k2", Tensor::from_fn(&[3, 3, 3, 2], |_| rng.gen_range(-1.0..1.0)));
        p.insert("b2", Tensor::from_fn(&[2], |_| rng.gen_range(-0.2..0.2)));
        let x = Tensor::from_fn(&[1, 5, 6, 1], |_| rng.gen_range(0.0..1.0));
        let build = |tape: &mut Tape<f64>, q: &ParamSet<f64>| {
            let xi = tape.constant(x.clone());
            let k1 = tape.param(q, "k1").unwrap();
            let b1 = tape.param(q, "b1").unwrap();
            let k2 = tape.param(q, "k2").unwrap();
            let b2 = tape.param(q, "b2").unwrap();
            let h = tape.masked_conv2d_same(xi, k1, b1, &mask_a).unwrap();
            let h = tape.relu(h);
            let o = tape.masked_conv2d_same(h, k2, b2, &mask_b).unwrap();
            let o2 = tape.mul(o, o).unwrap();
            tape.sum(o2)
        };
        let mut tape = Tape::new();
        let l = build(&mut tape, &p);
        let g = tape.backward(l, &p).unwrap();
        let fd = finite_diff_gradient(
            |q| {
                let mut t = Tape::new();
                let l = build(&mut t, q);
                t.value(l).data()[0]
            },
            &p,
            1e-3,
        );
        let (err, name, i) = max_relative_error(&g, &fd, 1e-6);
        assert!(err <= 1e-3, "{err} at {name}[{i}]");
    }

    #[test]
    fn uniform_head_gives_log2_k_bits() {
        for (k, bits) in [(256, 8.0), (4, 2.0)] {
            let model = PixelCnn::new(small_config(HeadKind::Categorical { num_categories: k })).unwrap();
            let params = model.init_params(0);
            let px = random_pixels(42, 3);
            let raw = model.head_output(&params, &px, 1).unwrap();
            let r = model.nll(&raw, &px).unwrap();
            assert!((r.bits_per_dim - bits).abs() < 1e-6);
        }
    }
}
