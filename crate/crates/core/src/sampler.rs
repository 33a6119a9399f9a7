//! Raster-order pixel sampling, with an optional incremental forward pass.
//!
//! Every activation at raster position `q` depends only on canvas pixels
//! before `q`. The fast path therefore evaluates each layer one position at
//! a time, through the same per-pixel convolution kernel the batched forward
//! pass uses, and never revisits a position. That keeps its output
//! bit-identical to a full forward pass.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, read_pgm, write_pgm, RasterImage};
use crate::error::{Error, Result};
use crate::likelihood::{sample_pixel, total_variation};
use crate::model::{block_names, kb, scale_pixel, PixelCnn, POST_LAYERS};
use crate::numerics::{conv_pixel, relu, ConvPlan, ParamSet};
use crate::training::Checkpoint;

/// Generation settings for one image.
#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub temperature: f64,
    /// Image whose top `seed_rows` rows are kept verbatim.
    pub seed_image: Option<RasterImage>,
    pub seed_rows: usize,
    pub fast: bool,
}

impl SampleOptions {
    pub fn new(temperature: f64) -> Self {
        SampleOptions {
            temperature,
            ..Default::default()
        }
    }

    fn validate(&self, model: &PixelCnn) -> Result<()> {
        let cfg = model.config();
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if self.seed_rows > cfg.image_h {
            return Err(Error::Invalid(format!(
                "seed_rows {} exceeds image height {}",
                self.seed_rows, cfg.image_h
            )));
        }
        if self.seed_rows > 0 && self.seed_image.is_none() {
            return Err(Error::Invalid("seed_rows given without a seed image".into()));
        }
        if let Some(img) = &self.seed_image {
            if img.width() != cfg.image_w || img.height() != cfg.image_h {
                return Err(Error::Shape(format!(
                    "seed image is {}x{}, model expects {}x{}",
                    img.width(),
                    img.height(),
                    cfg.image_w,
                    cfg.image_h
                )));
            }
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-layer activations for positions `0..computed` of a single image.
#[derive(Clone, Debug)]
pub struct FastCache {
    h: usize,
    w: usize,
    computed: usize,
    /// Canvas prefix the computed activations were derived from.
    dep_len: usize,
    dep_hash: u64,
    input: Vec<f32>,
    /// Residual stream after the first layer and after each block.
    stream: Vec<Vec<f32>>,
    reduce: Vec<Vec<f32>>,
    masked: Vec<Vec<f32>>,
    expand: Vec<Vec<f32>>,
    post: Vec<Vec<f32>>,
    head: Vec<f32>,
    acc: Vec<f64>,
}

impl FastCache {
    pub fn new(model: &PixelCnn) -> Self {
        let cfg = model.config();
        let n = cfg.pixels();
        let f = cfg.num_filters;
        let blocks = cfg.num_resnet;
        FastCache {
            h: cfg.image_h,
            w: cfg.image_w,
            computed: 0,
            dep_len: 0,
            dep_hash: fnv1a(&[]),
            input: vec![0.0; n],
            stream: vec![vec![0.0; n * f]; blocks + 1],
            reduce: vec![vec![0.0; n * f / 2]; blocks],
            masked: vec![vec![0.0; n * f / 2]; blocks],
            expand: vec![vec![0.0; n * f]; blocks],
            post: vec![vec![0.0; n * f]; POST_LAYERS],
            head: vec![0.0; n * cfg.head.channels()],
            acc: vec![0.0; f.max(cfg.head.channels())],
        }
    }

    /// Number of positions whose activations are final.
    pub fn computed(&self) -> usize {
        self.computed
    }
}

struct Layer<'a> {
    plan: &'a ConvPlan,
    kernel: &'a [f32],
    bias: &'a [f32],
}

fn layer<'a>(plan: &'a ConvPlan, params: &'a ParamSet<f32>, prefix: &str) -> Result<Layer<'a>> {
    let (k, b) = kb(prefix);
    Ok(Layer {
        plan,
        kernel: params.require(&k)?.data(),
        bias: params.require(&b)?.data(),
    })
}

impl Layer<'_> {
    fn at(&self, input: &[f32], h: usize, w: usize, p: usize, acc: &mut [f64], out: &mut [f32]) {
        let co = self.plan.co;
        conv_pixel(
            input,
            h,
            w,
            self.plan,
            self.kernel,
            self.bias,
            0,
            p / w,
            p % w,
            &mut acc[..co],
            &mut out[p * co..(p + 1) * co],
        );
    }
}

/// Raw head values at `pixel_index`, bit-identical to the eval-mode forward
/// pass over `canvas`. Positions between the cache's frontier and
/// `pixel_index` are computed on the way. The canvas prefix the cache was
/// built from must not have changed since the previous call.
pub fn fast_forward_at(
    model: &PixelCnn,
    params: &ParamSet<f32>,
    canvas: &[u8],
    pixel_index: usize,
    cache: &mut FastCache,
) -> Result<Vec<f32>> {
    let cfg = model.config();
    let n = cfg.pixels();
    if cache.h != cfg.image_h || cache.w != cfg.image_w || cache.head.len() != n * cfg.head.channels() {
        return Err(Error::Shape("cache was built for a different model".into()));
    }
    if canvas.len() != n || pixel_index >= n {
        return Err(Error::Shape(format!(
            "pixel {pixel_index} of a {}-pixel canvas, model has {n} pixels",
            canvas.len()
        )));
    }
    if fnv1a(&canvas[..cache.dep_len]) != cache.dep_hash {
        return Err(Error::StaleCache(cache.dep_len));
    }
    let (h, w) = (cfg.image_h, cfg.image_w);
    let plans = &model.plans;
    let first = layer(&plans.input, params, "input")?;
    let mut blocks = Vec::with_capacity(cfg.num_resnet);
    for i in 0..cfg.num_resnet {
        let names = block_names(i);
        let get = |plan, (k, b): &(String, String)| -> Result<Layer<'_>> {
            Ok(Layer {
                plan,
                kernel: params.require(k)?.data(),
                bias: params.require(b)?.data(),
            })
        };
        blocks.push((
            get(&plans.reduce, &names.reduce)?,
            get(&plans.masked, &names.masked)?,
            get(&plans.expand, &names.expand)?,
        ));
    }
    let post = (0..POST_LAYERS)
        .map(|j| layer(&plans.post, params, &format!("post{j}")))
        .collect::<Result<Vec<_>>>()?;
    let head = layer(&plans.head, params, "head")?;

    let f = cfg.num_filters;
    for p in cache.computed..=pixel_index {
        // position p reads canvas pixels strictly before it
        for q in cache.dep_len..p {
            cache.input[q] = scale_pixel(canvas[q]);
        }
        cache.dep_len = cache.dep_len.max(p);
        let acc = &mut cache.acc;
        first.at(&cache.input, h, w, p, acc, &mut cache.stream[0]);
        for v in &mut cache.stream[0][p * f..(p + 1) * f] {
            *v = relu(*v);
        }
        for (i, (reduce, masked, expand)) in blocks.iter().enumerate() {
            let (before, after) = cache.stream.split_at_mut(i + 1);
            let x = &before[i];
            reduce.at(x, h, w, p, acc, &mut cache.reduce[i]);
            let half = f / 2;
            for v in &mut cache.reduce[i][p * half..(p + 1) * half] {
                *v = relu(*v);
            }
            masked.at(&cache.reduce[i], h, w, p, acc, &mut cache.masked[i]);
            for v in &mut cache.masked[i][p * half..(p + 1) * half] {
                *v = relu(*v);
            }
            expand.at(&cache.masked[i], h, w, p, acc, &mut cache.expand[i]);
            let expanded = &cache.expand[i];
            let out = &mut after[0][p * f..(p + 1) * f];
            for ((o, &a), &b) in out.iter_mut().zip(&x[p * f..(p + 1) * f]).zip(&expanded[p * f..(p + 1) * f]) {
                *o = a + b;
            }
        }
        for (j, l) in post.iter().enumerate() {
            let (done, rest) = cache.post.split_at_mut(j);
            let x = done.last().unwrap_or(&cache.stream[cfg.num_resnet]);
            l.at(x, h, w, p, acc, &mut rest[0]);
            for v in &mut rest[0][p * f..(p + 1) * f] {
                *v = relu(*v);
            }
        }
        let x = cache.post.last().unwrap_or(&cache.stream[cfg.num_resnet]);
        head.at(x, h, w, p, acc, &mut cache.head);
        cache.computed = p + 1;
    }
    cache.dep_hash = fnv1a(&canvas[..cache.dep_len]);
    let c = cfg.head.channels();
    Ok(cache.head[pixel_index * c..(pixel_index + 1) * c].to_vec())
}

/// Raw head values at one pixel from a full eval-mode forward pass.
pub fn full_forward_at(model: &PixelCnn, params: &ParamSet<f32>, canvas: &[u8], pixel_index: usize) -> Result<Vec<f32>> {
    let raw = model.head_output(params, canvas, 1)?;
    let c = raw.channels();
    if pixel_index >= canvas.len() {
        return Err(Error::Shape(format!("pixel {pixel_index} out of range")));
    }
    Ok(raw.data()[pixel_index * c..(pixel_index + 1) * c].to_vec())
}

fn initial_canvas(model: &PixelCnn, opts: &SampleOptions) -> (Vec<u8>, usize) {
    let cfg = model.config();
    match &opts.seed_image {
        Some(img) => (img.pixels().to_vec(), opts.seed_rows * cfg.image_w),
        None => (vec![0; cfg.pixels()], 0),
    }
}

/// Fills `canvas[range]` in raster order.
fn generate_into(
    model: &PixelCnn,
    params: &ParamSet<f32>,
    canvas: &mut [u8],
    range: std::ops::Range<usize>,
    tau: f64,
    cache: Option<&mut FastCache>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut cache = cache;
    for p in range {
        let raw = match cache.as_deref_mut() {
            Some(c) => fast_forward_at(model, params, canvas, p, c)?,
            None => full_forward_at(model, params, canvas, p)?,
        };
        let decoded = model.decode_pixel(&raw);
        canvas[p] = sample_pixel(&decoded.head(), tau, rng);
    }
    Ok(())
}

/// Generates one image pixel by pixel. The empty canvas is all zeros; rows
/// inside the seed region are copied from the seed image and never touched.
pub fn sample_image(
    model: &PixelCnn,
    params: &ParamSet<f32>,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<RasterImage> {
    opts.validate(model)?;
    let cfg = model.config();
    let (mut canvas, start) = initial_canvas(model, opts);
    let mut cache = opts.fast.then(|| FastCache::new(model));
    generate_into(model, params, &mut canvas, start..cfg.pixels(), opts.temperature, cache.as_mut(), rng)?;
    RasterImage::from_pixels(cfg.image_w, cfg.image_h, canvas)
}

/// Result of comparing sampled values with the head distribution at a pixel.
#[derive(Clone, Debug)]
pub struct PmfAgreement {
    pub pixel_index: usize,
    pub draws: usize,
    pub head_pmf: [f64; 256],
    pub empirical: [f64; 256],
    pub total_variation: f64,
}

/// Draws `draws` single-pixel continuations of `prefix` (pixels before
/// `pixel_index`) through the sampler loop and compares their histogram with
/// the head pmf from a full forward pass.
pub fn pmf_agreement(
    model: &PixelCnn,
    params: &ParamSet<f32>,
    prefix: &RasterImage,
    pixel_index: usize,
    draws: usize,
    seed: u64,
) -> Result<PmfAgreement> {
    let mut canvas = prefix.pixels().to_vec();
    if canvas.len() != model.config().pixels() || pixel_index >= canvas.len() {
        return Err(Error::Shape("prefix does not match the model".into()));
    }
    for v in &mut canvas[pixel_index..] {
        *v = 0;
    }
    let raw = full_forward_at(model, params, &canvas, pixel_index)?;
    let head_pmf = model.decode_pixel(&raw).head().pmf();

    let mut primed = FastCache::new(model);
    if pixel_index > 0 {
        fast_forward_at(model, params, &canvas, pixel_index - 1, &mut primed)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 256];
    for _ in 0..draws {
        let mut cache = primed.clone();
        let mut c = canvas.clone();
        generate_into(model, params, &mut c, pixel_index..pixel_index + 1, 1.0, Some(&mut cache), &mut rng)?;
        counts[c[pixel_index] as usize] += 1;
    }
    let mut empirical = [0.0; 256];
    for (e, &k) in empirical.iter_mut().zip(&counts) {
        *e = k as f64 / draws.max(1) as f64;
    }
    Ok(PmfAgreement {
        pixel_index,
        draws,
        total_variation: total_variation(&head_pmf, &empirical),
        head_pmf,
        empirical,
    })
}

/// Settings for a batch of samples written to disk.
#[derive(Clone, Debug)]
pub struct SampleConfig {
    pub checkpoint: PathBuf,
    pub count: usize,
    pub temperature: f64,
    pub rng_seed: u64,
    pub seed_image: Option<PathBuf>,
    pub seed_rows: usize,
    pub out_dir: PathBuf,
    pub fast: bool,
    /// Dataset directory used for the nearest-training-image distance.
    pub train_data: Option<PathBuf>,
}

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub checkpoint: String,
    pub temperature: f64,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    /// Mean absolute pixel difference to the closest training image, a hint
    /// for spotting copies. `None` without training data.
    pub nearest_train_l1: Vec<Option<f64>>,
}

fn image_seed(rng_seed: u64, index: usize) -> u64 {
    let mut z = rng_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` images on independent rng streams (in parallel), then
/// writes them and the run manifest in index order.
pub fn sample_images(
    model: &PixelCnn,
    params: &ParamSet<f32>,
    opts: &SampleOptions,
    rng_seed: u64,
    count: usize,
) -> Result<Vec<(u64, RasterImage)>> {
    opts.validate(model)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = image_seed(rng_seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_image(model, params, opts, &mut rng).map(|img| (seed, img))
        })
        .collect()
}

pub fn run_sampling(cfg: &SampleConfig) -> Result<RunManifest> {
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let model = ckpt.model()?;
    let seed_image = cfg.seed_image.as_ref().map(read_pgm).transpose()?;
    let opts = SampleOptions {
        temperature: cfg.temperature,
        seed_image,
        seed_rows: cfg.seed_rows,
        fast: cfg.fast,
    };
    let train = match &cfg.train_data {
        Some(dir) => load_dataset(dir)?
            .into_iter()
            .map(|l| l.image)
            .filter(|i| i.width() == model.config().image_w && i.height() == model.config().image_h)
            .collect(),
        None => Vec::new(),
    };
    let samples = sample_images(&model, &ckpt.params, &opts, cfg.rng_seed, cfg.count)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut manifest = RunManifest {
        checkpoint: cfg.checkpoint.display().to_string(),
        temperature: cfg.temperature,
        seeds: Vec::new(),
        files: Vec::new(),
        nearest_train_l1: Vec::new(),
    };
    for (i, (seed, img)) in samples.iter().enumerate() {
        let file = format!("sample_{i:04}.pgm");
        write_pgm(cfg.out_dir.join(&file), img)?;
        manifest.seeds.push(*seed);
        manifest.files.push(file);
        manifest.nearest_train_l1.push(nearest_l1(img, &train));
    }
    write_manifest(&cfg.out_dir, &manifest)?;
    Ok(manifest)
}

fn nearest_l1(img: &RasterImage, train: &[RasterImage]) -> Option<f64> {
    train.iter().map(|t| img.mean_l1(t)).reduce(f64::min)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(RUN_MANIFEST);
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
