//! Adam training loop, binary checkpoints and held-out evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, LabeledImage, RasterImage, Subtype};
use crate::error::{Error, Result};
use crate::likelihood::NllReport;
use crate::model::{scale_pixels, Mode, ModelConfig, PixelCnn};
use crate::numerics::{ParamSet, Tape, Tensor};

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    10
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Write a checkpoint every this many steps. No checkpoints but the
    /// final one when unset.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Stop after this many optimizer steps in total, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub data_dir: PathBuf,
    /// Receives `metrics.csv` and checkpoints. Nothing is written when unset.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(data_dir: impl Into<PathBuf>, model: ModelConfig) -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            rng_seed: 0,
            checkpoint_every: None,
            max_steps: None,
            data_dir: data_dir.into(),
            out_dir: None,
            resume: None,
            model,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("adam betas must lie in [0, 1)".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Invalid("checkpoint_every must be positive".into()));
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moment estimates plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, computed in f64 and stored in f32.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.require(name)?;
        let same = |t: &Tensor<f32>| t.shape() == p.shape();
        if !same(g) || !same(state.m.require(name)?) || !same(state.v.require(name)?) {
            return Err(Error::Shape(format!(
                "gradient or moment for `{name}` does not match parameter shape {:?}",
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.require(name)?.data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamSet<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
    pub rng: RngState,
}

const MAGIC: &[u8; 4] = b"PXCN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }
}

impl Checkpoint {
    /// Layout (little-endian): magic, version u32, config JSON (u32 length
    /// prefix), step u64, rng seed/stream/word position, parameter count u32,
    /// then per parameter in name order: name, rank and dims, values,
    /// first moments, second moments. An FNV-1a hash of everything before it
    /// closes the file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for set in [&self.params, &self.adam_m, &self.adam_v] {
                for x in set.get(name).expect("moments cover every parameter").data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses and validates a whole checkpoint before returning any part of it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a PXCN checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| Error::Checkpoint(format!("config JSON: {e}")))?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = r.u128("rng position")?;
        let count = r.u32("parameter count")?;
        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("implausible rank {rank} for `{name}`")));
            }
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= body.len())
                .ok_or_else(|| Error::Checkpoint(format!("implausible shape for `{name}`")))?;
            for set in sets.iter_mut() {
                let data = r
                    .take(4 * n, &name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                set.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected bytes after the last parameter",
                body.len() - r.pos
            )));
        }
        let model = PixelCnn::new(config.clone())
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        model
            .check_params(&sets[0])
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if sets[0].len() != model.init_params(0).len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        let [params, adam_m, adam_v] = sets;
        Ok(Checkpoint {
            config,
            step,
            params,
            adam_m,
            adam_v,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and insists it was written for `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        match expected.mismatched_field(&ckpt.config) {
            Some(field) => Err(Error::ConfigMismatch { field }),
            None => Ok(ckpt),
        }
    }

    /// Untrained checkpoint from `PixelCnn::init_params`.
    pub fn untrained(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = PixelCnn::new(config.clone())?;
        let params = model.init_params(seed);
        Ok(Checkpoint {
            config,
            step: 0,
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn model(&self) -> Result<PixelCnn> {
        PixelCnn::new(self.config.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub bits_per_dim: f64,
}

pub const METRIC_HEADER: &str = "step,epoch,split,bits_per_dim";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.epoch, self.split, self.bits_per_dim)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Per-step training rows followed by one `train_eval` row.
    pub metrics: Vec<MetricRow>,
    /// Eval-mode bits/dim of the final parameters on the training images.
    pub final_eval: NllReport,
}

impl TrainOutcome {
    pub fn step_losses(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.bits_per_dim)
            .collect()
    }
}

fn epoch_order(n: usize, rng_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

fn check_dims(cfg: &ModelConfig, img: &RasterImage) -> Result<()> {
    if img.width() != cfg.image_w || img.height() != cfg.image_h {
        return Err(Error::Shape(format!(
            "image is {}x{}, model expects {}x{}",
            img.width(),
            img.height(),
            cfg.image_w,
            cfg.image_h
        )));
    }
    Ok(())
}

fn gather(images: &[&RasterImage]) -> Vec<u8> {
    images.iter().flat_map(|i| i.pixels().iter().copied()).collect()
}

/// Loads `data_dir` (and `resume`, when set) and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_dir)?;
    let images: Vec<RasterImage> = data.into_iter().map(|l| l.image).collect();
    let resume = match &cfg.resume {
        Some(p) => Some(Checkpoint::load_for(p, &cfg.model)?),
        None => None,
    };
    train_on(cfg, &images, resume)
}

/// Trains on in-memory images. Every pixel of every image is a target; the
/// loss is mean bits/dim over the batch.
pub fn train_on(
    cfg: &TrainConfig,
    images: &[RasterImage],
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    for img in images {
        check_dims(&cfg.model, img)?;
    }
    let model = PixelCnn::new(cfg.model.clone())?;
    let (mut params, mut adam, mut rng) = match resume {
        Some(ck) => {
            if let Some(field) = cfg.model.mismatched_field(&ck.config) {
                return Err(Error::ConfigMismatch { field });
            }
            let adam = AdamState {
                m: ck.adam_m,
                v: ck.adam_v,
                step: ck.step,
            };
            (ck.params, adam, ck.rng.restore())
        }
        None => {
            let params = model.init_params(cfg.rng_seed);
            let adam = AdamState::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(0);
            (params, adam, rng)
        }
    };
    let metrics_path = cfg.out_dir.as_ref().map(|d| d.join("metrics.csv"));
    let mut log = match (&cfg.out_dir, &metrics_path) {
        (Some(dir), Some(path)) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let fresh = adam.step == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            if fresh {
                writeln!(f, "{METRIC_HEADER}").map_err(|e| Error::io(path, e))?;
            }
            Some(f)
        }
        _ => None,
    };
    let mut emit = |row: &MetricRow, metrics: &mut Vec<MetricRow>| -> Result<()> {
        if let (Some(f), Some(path)) = (log.as_mut(), metrics_path.as_ref()) {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(path, e))?;
        }
        metrics.push(row.clone());
        Ok(())
    };

    let n = images.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let limit = cfg
        .max_steps
        .unwrap_or(u64::MAX)
        .min(per_epoch * cfg.epochs as u64);
    let adam_cfg = cfg.adam();
    let mut metrics = Vec::new();
    let mut last_finite = f64::NAN;
    let pixels_per_image = cfg.model.pixels();

    while adam.step < limit {
        let epoch = (adam.step / per_epoch) as usize;
        let offset = (adam.step % per_epoch) as usize * cfg.batch_size;
        let order = epoch_order(n, cfg.rng_seed, epoch);
        let idx = &order[offset..(offset + cfg.batch_size).min(n)];
        let batch: Vec<&RasterImage> = idx.iter().map(|&i| &images[i]).collect();
        let pixels = gather(&batch);
        debug_assert_eq!(pixels.len(), batch.len() * pixels_per_image);
        let input = scale_pixels(&pixels, batch.len(), cfg.model.image_h, cfg.model.image_w)?;
        let mut tape = Tape::new();
        let head = model.forward(&mut tape, &params, input, Mode::Train(&mut rng))?;
        let (loss, report) = model.loss(&mut tape, head, &pixels)?;
        let step = adam.step + 1;
        if !report.bits_per_dim.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite });
        }
        last_finite = report.bits_per_dim;
        let grads = tape.backward(loss, &params)?;
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        emit(
            &MetricRow {
                step,
                epoch,
                split: "train".into(),
                bits_per_dim: report.bits_per_dim,
            },
            &mut metrics,
        )?;
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.out_dir) {
            if step % every == 0 {
                snapshot(&cfg.model, &params, &adam, &rng)
                    .save(dir.join(format!("ckpt_{step:06}.pxcn")))?;
            }
        }
    }

    let refs: Vec<&RasterImage> = images.iter().collect();
    let final_eval = eval_images(&model, &params, &refs, cfg.batch_size)?;
    let epoch = (adam.step.saturating_sub(1) / per_epoch) as usize;
    emit(
        &MetricRow {
            step: adam.step,
            epoch,
            split: "train_eval".into(),
            bits_per_dim: final_eval.bits_per_dim,
        },
        &mut metrics,
    )?;
    let checkpoint = snapshot(&cfg.model, &params, &adam, &rng);
    if let Some(dir) = &cfg.out_dir {
        checkpoint.save(dir.join("final.pxcn"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        final_eval,
    })
}

fn snapshot(cfg: &ModelConfig, params: &ParamSet<f32>, adam: &AdamState, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        step: adam.step,
        params: params.clone(),
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        rng: RngState::capture(rng),
    }
}

/// Eval-mode NLL of `images`, summed in a fixed order.
pub fn eval_images(
    model: &PixelCnn,
    params: &ParamSet<f32>,
    images: &[&RasterImage],
    batch_size: usize,
) -> Result<NllReport> {
    let mut total = NllReport::empty();
    for img in images {
        check_dims(model.config(), img)?;
    }
    for chunk in images.chunks(batch_size.max(1)) {
        let pixels = gather(chunk);
        let raw = model.head_output(params, &pixels, chunk.len())?;
        total = total.merge(&model.nll(&raw, &pixels)?);
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub overall: NllReport,
    pub per_subtype: BTreeMap<Subtype, NllReport>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("group,pixels,bits_per_dim\n");
        for (s, r) in &self.per_subtype {
            out.push_str(&format!("{s},{},{}\n", r.pixel_count, r.bits_per_dim));
        }
        out.push_str(&format!(
            "overall,{},{}\n",
            self.overall.pixel_count, self.overall.bits_per_dim
        ));
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>10}\n", "group", "bits/dim");
        for (s, r) in &self.per_subtype {
            out.push_str(&format!("{:<28} {:>10.4}\n", s.name(), r.bits_per_dim));
        }
        out.push_str(&format!("{:<28} {:>10.2}\n", "overall", self.overall.bits_per_dim));
        out
    }
}

pub fn eval_labeled(ckpt: &Checkpoint, data: &[LabeledImage]) -> Result<EvalReport> {
    let model = ckpt.model()?;
    let mut per_subtype = BTreeMap::new();
    for s in Subtype::ALL {
        let imgs: Vec<&RasterImage> = data
            .iter()
            .filter(|l| l.subtype == s)
            .map(|l| &l.image)
            .collect();
        if !imgs.is_empty() {
            per_subtype.insert(s, eval_images(&model, &ckpt.params, &imgs, 16)?);
        }
    }
    let overall = per_subtype
        .values()
        .fold(NllReport::empty(), |acc, r| acc.merge(r));
    Ok(EvalReport {
        overall,
        per_subtype,
    })
}

/// Bits/dim of the dataset in `data_dir`, overall and per subtype.
pub fn eval_nll(ckpt: &Checkpoint, data_dir: impl AsRef<Path>) -> Result<EvalReport> {
    eval_labeled(ckpt, &load_dataset(data_dir)?)
}
