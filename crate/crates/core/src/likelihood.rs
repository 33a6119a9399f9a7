//! Per-pixel distribution heads: a categorical head over (optionally binned)
//! intensities and a discretized logistic mixture over the 0..=255 range.

use std::f64::consts::LN_2;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Smallest logistic scale the mixture head may use.
pub const MIN_SCALE: f64 = 1e-3;

pub fn min_log_scale() -> f64 {
    MIN_SCALE.ln()
}

/// Splits 0..=255 into `num_bins` contiguous intervals whose widths differ by
/// at most one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantizer {
    num_bins: usize,
}

impl Quantizer {
    pub fn new(num_bins: usize) -> Result<Self> {
        if !(2..=256).contains(&num_bins) {
            return Err(Error::Invalid(format!(
                "number of bins must be in 2..=256, got {num_bins}"
            )));
        }
        Ok(Quantizer { num_bins })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn quantize(&self, v: u32) -> Result<usize> {
        if v > 255 {
            return Err(Error::Invalid(format!("pixel value {v} outside 0..=255")));
        }
        Ok(self.bin_of(v as u8))
    }

    #[inline]
    pub fn bin_of(&self, v: u8) -> usize {
        v as usize * self.num_bins / 256
    }

    /// Inclusive value range covered by `bin`.
    pub fn bounds(&self, bin: usize) -> (u32, u32) {
        let k = self.num_bins;
        let lo = (256 * bin).div_ceil(k);
        let hi = (256 * (bin + 1)).div_ceil(k) - 1;
        (lo as u32, hi as u32)
    }

    /// Rounded midpoint of the bin (halves round up).
    pub fn dequantize(&self, bin: usize) -> Result<u8> {
        if bin >= self.num_bins {
            return Err(Error::Invalid(format!(
                "bin {bin} outside 0..{}",
                self.num_bins
            )));
        }
        Ok(self.center(bin))
    }

    #[inline]
    fn center(&self, bin: usize) -> u8 {
        let (lo, hi) = self.bounds(bin);
        ((lo + hi + 1) / 2) as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub total_nats: f64,
    pub pixel_count: usize,
    pub bits_per_dim: f64,
}

impl NllReport {
    pub fn from_nats(total_nats: f64, pixel_count: usize) -> Self {
        let bits_per_dim = if pixel_count == 0 {
            0.0
        } else {
            total_nats / (pixel_count as f64 * LN_2)
        };
        NllReport {
            total_nats,
            pixel_count,
            bits_per_dim,
        }
    }

    pub fn empty() -> Self {
        Self::from_nats(0.0, 0)
    }

    pub fn merge(&self, other: &NllReport) -> Self {
        Self::from_nats(
            self.total_nats + other.total_nats,
            self.pixel_count + other.pixel_count,
        )
    }

    pub fn nats_per_pixel(&self) -> f64 {
        self.total_nats / self.pixel_count.max(1) as f64
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln σ(x)` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(e^a - e^b)` for `a > b`.
#[inline]
fn log_diff_exp(a: f64, b: f64) -> f64 {
    a + (-(b - a).exp_m1()).ln()
}

fn check_targets<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<usize> {
    let k = logits.channels();
    let pixels = logits.len() / k;
    if targets.len() != pixels {
        return Err(Error::Shape(format!(
            "{} targets for {pixels} pixels",
            targets.len()
        )));
    }
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Invalid(format!(
            "target {t} at pixel {i} outside 0..{k}"
        )));
    }
    Ok(k)
}

/// Summed `-ln softmax(logits)[target]` over all pixels.
pub fn categorical_nll<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<NllReport> {
    let k = check_targets(logits, targets)?;
    let total: f64 = logits
        .data()
        .chunks(k)
        .zip(targets)
        .map(|(row, &t)| {
            let lse = log_sum_exp(row.iter().map(|v| v.f64()));
            lse - row[t].f64()
        })
        .sum();
    Ok(NllReport::from_nats(total, targets.len()))
}

/// [`categorical_nll`] plus the gradient of the total nats with respect to
/// the logits.
pub fn categorical_nll_with_grad<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(NllReport, Tensor<T>)> {
    let k = check_targets(logits, targets)?;
    let mut grad = vec![T::zero(); logits.len()];
    let mut nats = vec![0.0f64; targets.len()];
    grad.par_chunks_mut(k)
        .zip(nats.par_iter_mut())
        .zip(logits.data().par_chunks(k))
        .zip(targets.par_iter())
        .for_each(|(((g, nll), row), &t)| {
            let lse = log_sum_exp(row.iter().map(|v| v.f64()));
            *nll = lse - row[t].f64();
            for (j, (gj, v)) in g.iter_mut().zip(row).enumerate() {
                let p = (v.f64() - lse).exp();
                *gj = T::of(if j == t { p - 1.0 } else { p });
            }
        });
    let total = nats.iter().sum();
    Ok((
        NllReport::from_nats(total, targets.len()),
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

/// Natural log of the probability a single logistic component assigns to
/// the unit bin around `v`, edge bins extending to infinity.
pub fn dlm_log_pmf(mean: f64, log_scale: f64, v: u8) -> f64 {
    let inv_s = (-log_scale.max(min_log_scale())).exp();
    let (lo, hi) = bin_edges(mean, inv_s, v);
    log_bin_mass(lo, hi)
}

pub fn dlm_pmf(mean: f64, log_scale: f64, v: u8) -> f64 {
    dlm_log_pmf(mean, log_scale, v).exp()
}

/// Standardized bin edges; `None` is an infinite edge.
#[inline]
fn bin_edges(mean: f64, inv_s: f64, v: u8) -> (Option<f64>, Option<f64>) {
    let lo = (v > 0).then(|| (v as f64 - 0.5 - mean) * inv_s);
    let hi = (v < 255).then(|| (v as f64 + 0.5 - mean) * inv_s);
    (lo, hi)
}

/// `ln(σ(hi) - σ(lo))`, evaluated on whichever tail keeps the terms small so
/// that mirrored bins give identical results.
#[inline]
fn log_bin_mass(lo: Option<f64>, hi: Option<f64>) -> f64 {
    match (lo, hi) {
        (None, None) => 0.0,
        (None, Some(h)) => log_sigmoid(h),
        (Some(l), None) => log_sigmoid(-l),
        (Some(l), Some(h)) => {
            if l + h > 0.0 {
                // upper tail: σ(-l) - σ(-h)
                log_diff_exp(log_sigmoid(-l), log_sigmoid(-h))
            } else {
                log_diff_exp(log_sigmoid(h), log_sigmoid(l))
            }
        }
    }
}

/// `ln σ'(x) = ln σ(x) + ln σ(-x)`.
#[inline]
fn log_sigmoid_deriv(x: f64) -> f64 {
    log_sigmoid(x) + log_sigmoid(-x)
}

/// Log-probability of one component and its derivatives with respect to the
/// mean and the (unclamped) log-scale. The log-scale derivative is zero while
/// the clamp is active.
pub fn dlm_log_pmf_with_grad(mean: f64, log_scale: f64, v: u8) -> (f64, f64, f64) {
    let clamped = log_scale < min_log_scale();
    let inv_s = (-log_scale.max(min_log_scale())).exp();
    let (lo, hi) = bin_edges(mean, inv_s, v);
    let logp = log_bin_mass(lo, hi);
    // d logP / d edge = ±σ'(edge) / P
    let w_hi = hi.map_or(0.0, |h| (log_sigmoid_deriv(h) - logp).exp());
    let w_lo = lo.map_or(0.0, |l| (log_sigmoid_deriv(l) - logp).exp());
    // edges e = (v ± 0.5 - mean)/s: de/dmean = -1/s, de/dlog_s = -e
    let d_mean = -(w_hi - w_lo) * inv_s;
    let d_log_s = if clamped {
        0.0
    } else {
        -(w_hi * hi.unwrap_or(0.0) - w_lo * lo.unwrap_or(0.0))
    };
    (logp, d_mean, d_log_s)
}

/// Log-probability of value `v` under one pixel's mixture.
pub fn mixture_log_pmf<T: Real>(logits: &[T], means: &[T], log_scales: &[T], v: u8) -> f64 {
    let lse = log_sum_exp(logits.iter().map(|l| l.f64()));
    log_sum_exp((0..logits.len()).map(|m| {
        logits[m].f64() - lse + dlm_log_pmf(means[m].f64(), log_scales[m].f64(), v)
    }))
}

/// Gradients of the mixture NLL with respect to each head tensor.
#[derive(Clone, Debug)]
pub struct MixtureGrads<T: Real> {
    pub logits: Tensor<T>,
    pub means: Tensor<T>,
    pub log_scales: Tensor<T>,
}

fn check_mixture<T: Real>(
    logits: &Tensor<T>,
    means: &Tensor<T>,
    log_scales: &Tensor<T>,
    targets: &[u8],
) -> Result<usize> {
    if logits.shape() != means.shape() || logits.shape() != log_scales.shape() {
        return Err(Error::Shape(format!(
            "mixture tensors disagree: {:?}, {:?}, {:?}",
            logits.shape(),
            means.shape(),
            log_scales.shape()
        )));
    }
    let m = logits.channels();
    if targets.len() * m != logits.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} pixels",
            targets.len(),
            logits.len() / m
        )));
    }
    Ok(m)
}

/// Summed `-ln Σ_m w_m P_m(v)` over all pixels, weights from a softmax of the
/// mixture logits.
pub fn mixture_nll<T: Real>(
    logits: &Tensor<T>,
    means: &Tensor<T>,
    log_scales: &Tensor<T>,
    targets: &[u8],
) -> Result<NllReport> {
    let m = check_mixture(logits, means, log_scales, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(p, &v)| {
            let r = p * m..(p + 1) * m;
            -mixture_log_pmf(
                &logits.data()[r.clone()],
                &means.data()[r.clone()],
                &log_scales.data()[r],
                v,
            )
        })
        .sum();
    Ok(NllReport::from_nats(total, targets.len()))
}

pub fn mixture_nll_with_grad<T: Real>(
    logits: &Tensor<T>,
    means: &Tensor<T>,
    log_scales: &Tensor<T>,
    targets: &[u8],
) -> Result<(NllReport, MixtureGrads<T>)> {
    let m = check_mixture(logits, means, log_scales, targets)?;
    let n = logits.len();
    let mut g_logit = vec![T::zero(); n];
    let mut g_mean = vec![T::zero(); n];
    let mut g_ls = vec![T::zero(); n];
    let mut nats = vec![0.0f64; targets.len()];
    g_logit
        .par_chunks_mut(m)
        .zip(g_mean.par_chunks_mut(m))
        .zip(g_ls.par_chunks_mut(m))
        .zip(nats.par_iter_mut())
        .enumerate()
        .for_each(|(p, (((gl, gm), gs), nll))| {
            let v = targets[p];
            let lg = &logits.data()[p * m..(p + 1) * m];
            let mu = &means.data()[p * m..(p + 1) * m];
            let ls = &log_scales.data()[p * m..(p + 1) * m];
            let lse = log_sum_exp(lg.iter().map(|l| l.f64()));
            let comps: Vec<(f64, f64, f64, f64)> = (0..m)
                .map(|j| {
                    let (lp, dm, ds) = dlm_log_pmf_with_grad(mu[j].f64(), ls[j].f64(), v);
                    (lg[j].f64() - lse, lp, dm, ds)
                })
                .collect();
            let logp = log_sum_exp(comps.iter().map(|c| c.0 + c.1));
            *nll = -logp;
            for (j, &(logw, lp, dm, ds)) in comps.iter().enumerate() {
                let resp = (logw + lp - logp).exp();
                gl[j] = T::of(logw.exp() - resp);
                gm[j] = T::of(-resp * dm);
                gs[j] = T::of(-resp * ds);
            }
        });
    let shape = logits.shape().to_vec();
    Ok((
        NllReport::from_nats(nats.iter().sum(), targets.len()),
        MixtureGrads {
            logits: Tensor::new(shape.clone(), g_logit)?,
            means: Tensor::new(shape.clone(), g_mean)?,
            log_scales: Tensor::new(shape, g_ls)?,
        },
    ))
}

/// Head parameters for a single pixel.
#[derive(Clone, Copy, Debug)]
pub enum PixelHead<'a, T: Real = f32> {
    Categorical {
        logits: &'a [T],
        quantizer: Quantizer,
    },
    LogisticMixture {
        logits: &'a [T],
        means: &'a [T],
        log_scales: &'a [T],
    },
}

impl<T: Real> PixelHead<'_, T> {
    /// Probability of every intensity 0..=255. A categorical head puts each
    /// bin's mass on the bin's center value.
    pub fn pmf(&self) -> [f64; 256] {
        let mut out = [0.0; 256];
        match *self {
            PixelHead::Categorical { logits, quantizer } => {
                let lse = log_sum_exp(logits.iter().map(|l| l.f64()));
                for (b, l) in logits.iter().enumerate() {
                    out[quantizer.center(b) as usize] += (l.f64() - lse).exp();
                }
            }
            PixelHead::LogisticMixture {
                logits,
                means,
                log_scales,
            } => {
                for (v, o) in out.iter_mut().enumerate() {
                    *o = mixture_log_pmf(logits, means, log_scales, v as u8).exp();
                }
            }
        }
        out
    }
}

/// Index of the largest entry, lowest index on ties.
fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Draws an index from unnormalized log-weights.
fn draw_from_log_weights(logw: &[f64], rng: &mut impl Rng) -> usize {
    let lse = log_sum_exp(logw.iter().copied());
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &l) in logw.iter().enumerate() {
        let p = (l - lse).exp();
        if p > 0.0 {
            last = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last
}

/// Samples one intensity. Temperature 0 means argmax with ties going to the
/// lowest value; otherwise the categorical logits are divided by `tau` and the
/// mixture pmf is raised to `1/tau` and renormalized.
pub fn sample_pixel<T: Real>(head: &PixelHead<'_, T>, tau: f64, rng: &mut impl Rng) -> u8 {
    assert!(tau >= 0.0, "temperature must be non-negative");
    match *head {
        PixelHead::Categorical { logits, quantizer } => {
            let bin = if tau == 0.0 {
                argmax(logits.iter().map(|l| l.f64()))
            } else {
                let lw: Vec<f64> = logits.iter().map(|l| l.f64() / tau).collect();
                draw_from_log_weights(&lw, rng)
            };
            quantizer.center(bin)
        }
        PixelHead::LogisticMixture {
            logits,
            means,
            log_scales,
        } => {
            let logp: Vec<f64> = (0..=255u8)
                .map(|v| mixture_log_pmf(logits, means, log_scales, v))
                .collect();
            if tau == 0.0 {
                argmax(logp.iter().copied()) as u8
            } else {
                let lw: Vec<f64> = logp.iter().map(|l| l / tau).collect();
                draw_from_log_weights(&lw, rng) as u8
            }
        }
    }
}

/// Total-variation distance between two distributions over 0..=255.
pub fn total_variation(p: &[f64; 256], q: &[f64; 256]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error, ParamSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantizer_identity_at_256() {
        let q = Quantizer::new(256).unwrap();
        for v in 0..=255u32 {
            assert_eq!(q.quantize(v).unwrap(), v as usize);
            assert_eq!(q.dequantize(v as usize).unwrap() as u32, v);
        }
    }

    #[test]
    fn quantizer_halves() {
        let q = Quantizer::new(2).unwrap();
        assert!((0..=127).all(|v| q.quantize(v).unwrap() == 0));
        assert!((128..=255).all(|v| q.quantize(v).unwrap() == 1));
        assert_eq!(q.dequantize(0).unwrap(), 64);
        assert_eq!(q.dequantize(1).unwrap(), 192);
    }

    #[test]
    fn quantizer_round_trip_exhaustive() {
        assert_eq!(Quantizer::new(8).unwrap().quantize(255).unwrap(), 7);
        for k in [2usize, 4, 8, 16, 256] {
            let q = Quantizer::new(k).unwrap();
            let mut prev = 0;
            for v in 0..=255u32 {
                let b = q.quantize(v).unwrap();
                assert!(b >= prev, "monotone");
                prev = b;
                let (lo, hi) = q.bounds(b);
                assert!(lo <= v && v <= hi);
            }
            for b in 0..k {
                assert_eq!(q.quantize(q.dequantize(b).unwrap() as u32).unwrap(), b);
            }
        }
    }

    #[test]
    fn quantizer_widths_differ_by_at_most_one() {
        for k in 2..=256 {
            let q = Quantizer::new(k).unwrap();
            let widths: Vec<u32> = (0..k)
                .map(|b| {
                    let (lo, hi) = q.bounds(b);
                    hi - lo + 1
                })
                .collect();
            assert_eq!(widths.iter().sum::<u32>(), 256);
            let (mn, mx) = (widths.iter().min().unwrap(), widths.iter().max().unwrap());
            assert!(mx - mn <= 1, "k={k}");
        }
    }

    #[test]
    fn quantizer_rejects_out_of_range() {
        assert!(Quantizer::new(1).is_err());
        assert!(Quantizer::new(257).is_err());
        let q = Quantizer::new(4).unwrap();
        assert!(q.quantize(256).is_err());
        assert!(q.dequantize(4).is_err());
    }

    /// Logits for a K-way distribution with probability `p` at index `t`
    /// and the remainder spread evenly.
    fn logits_with_target_prob(k: usize, t: usize, p: f64) -> Tensor<f64> {
        let rest = (1.0 - p) / (k - 1) as f64;
        Tensor::from_fn(&[1, k], |i| if i == t { p.ln() } else { rest.ln() })
    }

    #[test]
    fn cross_entropy_example_values() {
        let hi = categorical_nll(&logits_with_target_prob(256, 254, 0.8), &[254]).unwrap();
        assert!((hi.total_nats - 0.2231).abs() < 5e-4, "{}", hi.total_nats);
        let lo = categorical_nll(&logits_with_target_prob(256, 254, 0.05), &[254]).unwrap();
        assert!((lo.total_nats - 2.996).abs() < 5e-4, "{}", lo.total_nats);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f32>::zeros(&[3, 256]);
        let r = categorical_nll(&logits, &[0, 17, 255]).unwrap();
        assert!((r.nats_per_pixel() - 256f64.ln()).abs() < 1e-9);
        assert!((r.bits_per_dim - 8.0).abs() < 1e-9);
    }

    #[test]
    fn categorical_rejects_bad_target() {
        let logits = Tensor::<f32>::zeros(&[2, 4]);
        assert!(categorical_nll(&logits, &[0, 4]).is_err());
        assert!(categorical_nll(&logits, &[0]).is_err());
    }

    #[test]
    fn categorical_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::<f64>::new();
        p.insert("l", Tensor::from_fn(&[6, 5], |_| rng.gen_range(-3.0..3.0)));
        let targets = [0usize, 4, 2, 2, 1, 3];
        let (_, g) = categorical_nll_with_grad(p.get("l").unwrap(), &targets).unwrap();
        let mut ga = ParamSet::new();
        ga.insert("l", g);
        let fd = finite_diff_gradient(
            |q| categorical_nll(q.get("l").unwrap(), &targets).unwrap().total_nats,
            &p,
            1e-3,
        );
        assert!(max_relative_error(&ga, &fd, 1e-6).0 <= 1e-3);
    }

    #[test]
    fn dlm_edge_value() {
        let p = dlm_pmf(0.0, 0.5f64.ln(), 0);
        assert!((p - 0.7311).abs() < 1e-4, "{p}");
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p - expect).abs() < 1e-12);
    }

    #[test]
    fn dlm_normalizes_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mu = rng.gen_range(-50.0..305.0);
            let s: f64 = rng.gen_range(0.05..100.0);
            let total: f64 = (0..=255u8).map(|v| dlm_pmf(mu, s.ln(), v)).sum();
            assert!((total - 1.0).abs() <= 1e-6, "mu={mu} s={s} total={total}");
            for v in 0..=255u8 {
                let a = dlm_pmf(127.5, s.ln(), v);
                let b = dlm_pmf(127.5, s.ln(), 255 - v);
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn dlm_clamps_tiny_scales() {
        let p = dlm_pmf(100.0, -50.0, 100);
        assert!(p.is_finite() && (p - dlm_pmf(100.0, min_log_scale(), 100)).abs() == 0.0);
        let total: f64 = (0..=255u8).map(|v| dlm_pmf(100.3, -50.0, v)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_component_mixture_reduces_to_dlm() {
        let logits = Tensor::<f64>::from_fn(&[3, 1], |_| 0.3);
        let means = Tensor::new(vec![3, 1], vec![10.0, 128.0, 250.0]).unwrap();
        let ls = Tensor::new(vec![3, 1], vec![0.5, 2.0, -1.0]).unwrap();
        let targets = [12u8, 100, 255];
        let r = mixture_nll(&logits, &means, &ls, &targets).unwrap();
        let direct: f64 = (0..3)
            .map(|i| -dlm_log_pmf(means.data()[i], ls.data()[i], targets[i]))
            .sum();
        assert!((r.total_nats - direct).abs() < 1e-12);
    }

    #[test]
    fn identical_components_collapse() {
        let one = mixture_nll(
            &Tensor::<f64>::zeros(&[1, 1]),
            &Tensor::new(vec![1, 1], vec![90.0]).unwrap(),
            &Tensor::new(vec![1, 1], vec![1.5]).unwrap(),
            &[97],
        )
        .unwrap();
        let two = mixture_nll(
            &Tensor::new(vec![1, 2], vec![-1.3, 2.2]).unwrap(),
            &Tensor::new(vec![1, 2], vec![90.0, 90.0]).unwrap(),
            &Tensor::new(vec![1, 2], vec![1.5, 1.5]).unwrap(),
            &[97],
        )
        .unwrap();
        assert!((one.total_nats - two.total_nats).abs() < 1e-12);
    }

    #[test]
    fn mixture_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (px, m) = (12, 3);
        let mut p = ParamSet::<f64>::new();
        p.insert("logits", Tensor::from_fn(&[px, m], |_| rng.gen_range(-2.0..2.0)));
        p.insert("means", Tensor::from_fn(&[px, m], |_| rng.gen_range(-20.0..275.0)));
        p.insert("log_scales", Tensor::from_fn(&[px, m], |_| rng.gen_range(0.0..4.0)));
        let mut targets: Vec<u8> = (0..px).map(|_| rng.gen()).collect();
        targets[0] = 0;
        targets[1] = 255;
        let nll = |q: &ParamSet<f64>| {
            mixture_nll(
                q.get("logits").unwrap(),
                q.get("means").unwrap(),
                q.get("log_scales").unwrap(),
                &targets,
            )
            .unwrap()
            .total_nats
        };
        let (_, g) = mixture_nll_with_grad(
            p.get("logits").unwrap(),
            p.get("means").unwrap(),
            p.get("log_scales").unwrap(),
            &targets,
        )
        .unwrap();
        let mut ga = ParamSet::new();
        ga.insert("logits", g.logits);
        ga.insert("means", g.means);
        ga.insert("log_scales", g.log_scales);
        let fd = finite_diff_gradient(nll, &p, 1e-3);
        let (err, name, i) = max_relative_error(&ga, &fd, 1e-6);
        assert!(err <= 1e-3, "{err} at {name}[{i}]");
    }

    #[test]
    fn categorical_argmax_at_zero_temperature() {
        let q = Quantizer::new(8).unwrap();
        let mut logits = [0.0f32; 8];
        logits[7] = 3.0;
        let head = PixelHead::Categorical {
            logits: &logits,
            quantizer: q,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_pixel(&head, 0.0, &mut rng), q.dequantize(7).unwrap());
        // ties go to the lowest value
        let flat = [1.0f32; 8];
        let head = PixelHead::Categorical {
            logits: &flat,
            quantizer: q,
        };
        assert_eq!(sample_pixel(&head, 0.0, &mut rng), q.dequantize(0).unwrap());
    }

    #[test]
    fn categorical_frequency_within_binomial_bound() {
        let q = Quantizer::new(256).unwrap();
        let mut logits = [f32::NEG_INFINITY; 256];
        logits[0] = 0.25f32.ln();
        logits[255] = 0.75f32.ln();
        let head = PixelHead::Categorical {
            logits: &logits,
            quantizer: q,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let hits = (0..10_000)
            .filter(|_| sample_pixel(&head, 1.0, &mut rng) == 255)
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((0.73..=0.77).contains(&freq), "{freq}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (l, m, s) = ([0.0f32], [120.0f32], [3.0f32]);
        let head = PixelHead::LogisticMixture {
            logits: &l,
            means: &m,
            log_scales: &s,
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_pixel(&head, 1.0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn mixture_sampling_reproduces_pmf() {
        let (l, m, s) = ([0.4f64, -0.2], [60.0, 190.0], [2.0, 2.5]);
        let head = PixelHead::LogisticMixture {
            logits: &l,
            means: &m,
            log_scales: &s,
        };
        let pmf = head.pmf();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut counts = [0.0f64; 256];
        for _ in 0..n {
            counts[sample_pixel(&head, 1.0, &mut rng) as usize] += 1.0 / n as f64;
        }
        let tv = total_variation(&pmf, &counts);
        assert!(tv <= 0.02, "tv {tv}");
    }

    #[test]
    fn true_distribution_has_lowest_expected_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let truth = [0.1f64, 0.6, 0.2, 0.1];
        let other = [0.25f64, 0.25, 0.25, 0.25];
        let skewed = [0.05f64, 0.4, 0.45, 0.1];
        let samples: Vec<usize> = (0..1000)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut c = 0.0;
                truth.iter().position(|p| {
                    c += p;
                    u < c
                })
                .unwrap_or(3)
            })
            .collect();
        let nll_of = |probs: &[f64; 4]| {
            let logits = Tensor::from_fn(&[samples.len(), 4], |i| probs[i % 4].ln());
            categorical_nll(&logits, &samples).unwrap().total_nats
        };
        let t = nll_of(&truth);
        assert!(t < nll_of(&other));
        assert!(t < nll_of(&skewed));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            vals in proptest::collection::vec(-10.0f64..10.0, 8),
            shift in -50.0f64..50.0,
            t in 0usize..4,
        ) {
            let a = Tensor::new(vec![2, 4], vals.clone()).unwrap();
            let b = a.map(|v| v + shift);
            let ra = categorical_nll(&a, &[t, 3 - t]).unwrap().total_nats;
            let rb = categorical_nll(&b, &[t, 3 - t]).unwrap().total_nats;
            prop_assert!((ra - rb).abs() <= 1e-5);
        }

        #[test]
        fn dlm_pmf_is_a_distribution(mu in -50.0f64..305.0, log_s in -8.0f64..6.0) {
            let mut total = 0.0;
            for v in 0..=255u8 {
                let p = dlm_pmf(mu, log_s, v);
                prop_assert!(p >= 0.0);
                total += p;
            }
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }
}
