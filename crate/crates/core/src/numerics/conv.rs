//! "Same"-padded 2-D convolution over NHWC tensors, optionally restricted to
//! the taps of a binary spatial mask.
//!
//! Every output pixel is produced by [`conv_pixel`], so a whole-tensor pass
//! and a single-pixel evaluation give bit-identical results.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Rows per work item in the kernel-gradient reduction. Fixed so the
/// summation order does not depend on the thread count.
const GRAD_ROW_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Tap {
    pub dy: isize,
    pub dx: isize,
    /// Row-major position inside the (kh, kw) window.
    pub index: usize,
}

/// Kernel geometry plus the list of taps that take part in the sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPlan {
    pub kh: usize,
    pub kw: usize,
    pub ci: usize,
    pub co: usize,
    pub(crate) taps: Vec<Tap>,
}

impl ConvPlan {
    pub fn new<T: Real>(kernel_shape: &[usize], mask: Option<&Tensor<T>>) -> Result<Self> {
        let &[kh, kw, ci, co] = kernel_shape else {
            return Err(Error::Shape(format!(
                "kernel must be (kh, kw, in, out), got {kernel_shape:?}"
            )));
        };
        if kh % 2 == 0 {
            return Err(Error::Shape(format!("kernel height kh={kh} must be odd")));
        }
        if kw % 2 == 0 {
            return Err(Error::Shape(format!("kernel width kw={kw} must be odd")));
        }
        if let Some(m) = mask {
            if m.shape() != [kh, kw] {
                return Err(Error::Shape(format!(
                    "mask shape {:?} does not match kernel window ({kh}, {kw})",
                    m.shape()
                )));
            }
            if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::Invalid("mask entries must be 0 or 1".into()));
            }
        }
        let (cy, cx) = ((kh / 2) as isize, (kw / 2) as isize);
        let taps = (0..kh * kw)
            .filter(|&i| mask.map_or(true, |m| m.data()[i] != T::zero()))
            .map(|i| Tap {
                dy: (i / kw) as isize - cy,
                dx: (i % kw) as isize - cx,
                index: i,
            })
            .collect();
        Ok(ConvPlan {
            kh,
            kw,
            ci,
            co,
            taps,
        })
    }

    pub fn active_taps(&self) -> usize {
        self.taps.len()
    }

    fn check_operands<T: Real>(&self, input: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "conv input must be (N, H, W, C), got {s:?}"
            )));
        }
        if s[3] != self.ci {
            return Err(Error::Shape(format!(
                "input channels C={} but kernel expects in={}",
                s[3], self.ci
            )));
        }
        if bias.len() != self.co {
            return Err(Error::Shape(format!(
                "bias length {} but kernel has out={}",
                bias.len(),
                self.co
            )));
        }
        Ok(())
    }
}

/// Computes all output channels of one pixel. `acc` must hold `plan.co`
/// entries; `out` receives the result.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv_pixel<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    plan: &ConvPlan,
    kernel: &[T],
    bias: &[T],
    n: usize,
    y: usize,
    x: usize,
    acc: &mut [f64],
    out: &mut [T],
) {
    let (ci, co) = (plan.ci, plan.co);
    for (a, b) in acc.iter_mut().zip(bias) {
        *a = b.f64();
    }
    for tap in &plan.taps {
        let yy = y as isize + tap.dy;
        let xx = x as isize + tap.dx;
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            continue;
        }
        let base = ((n * h + yy as usize) * w + xx as usize) * ci;
        let pixel = &input[base..base + ci];
        let kbase = tap.index * ci * co;
        for (c, &v) in pixel.iter().enumerate() {
            if v == T::zero() {
                continue;
            }
            let v = v.f64();
            let row = &kernel[kbase + c * co..kbase + (c + 1) * co];
            for (a, &k) in acc.iter_mut().zip(row) {
                *a += v * k.f64();
            }
        }
    }
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = T::of(a);
    }
}

pub(crate) fn conv_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    plan: &ConvPlan,
) -> Result<Tensor<T>> {
    plan.check_operands(input, bias)?;
    if kernel.shape() != [plan.kh, plan.kw, plan.ci, plan.co] {
        return Err(Error::Shape(format!(
            "kernel shape {:?} does not match plan",
            kernel.shape()
        )));
    }
    let s = input.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let co = plan.co;
    let mut out = vec![T::zero(); n * h * w * co];
    out.par_chunks_mut(w * co)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; co],
            |acc, (row, chunk)| {
                let (ni, y) = (row / h, row % h);
                for x in 0..w {
                    conv_pixel(
                        input.data(),
                        h,
                        w,
                        plan,
                        kernel.data(),
                        bias.data(),
                        ni,
                        y,
                        x,
                        acc,
                        &mut chunk[x * co..(x + 1) * co],
                    );
                }
            },
        );
    Tensor::new(vec![n, h, w, co], out)
}

/// Gradients of a convolution with respect to its input, kernel and bias.
pub(crate) struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    plan: &ConvPlan,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let s = input.shape();
    let (n, h, w, ci) = (s[0], s[1], s[2], s[3]);
    let co = plan.co;
    let go = grad_out.data();
    let kd = kernel.data();
    let xd = input.data();

    // d/d input: gather over the taps that read each input pixel.
    let mut gin = vec![T::zero(); n * h * w * ci];
    gin.par_chunks_mut(w * ci)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; ci],
            |acc, (row, chunk)| {
                let (ni, yy) = (row / h, row % h);
                for xx in 0..w {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for tap in &plan.taps {
                        let y = yy as isize - tap.dy;
                        let x = xx as isize - tap.dx;
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        let gbase = ((ni * h + y as usize) * w + x as usize) * co;
                        let g = &go[gbase..gbase + co];
                        let kbase = tap.index * ci * co;
                        for (c, a) in acc.iter_mut().enumerate() {
                            let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                            let mut s = 0.0f64;
                            for (&gv, &kv) in g.iter().zip(krow) {
                                s += gv.f64() * kv.f64();
                            }
                            *a += s;
                        }
                    }
                    for (dst, &a) in chunk[xx * ci..(xx + 1) * ci].iter_mut().zip(acc.iter()) {
                        *dst = T::of(a);
                    }
                }
            },
        );

    // d/d kernel: per fixed row block partial sums, reduced in block order.
    let blocks_per_image = h.div_ceil(GRAD_ROW_BLOCK);
    let ksize = plan.kh * plan.kw * ci * co;
    let partials: Vec<Vec<f64>> = (0..n * blocks_per_image)
        .into_par_iter()
        .map(|job| {
            let (ni, b) = (job / blocks_per_image, job % blocks_per_image);
            let mut part = vec![0.0f64; ksize];
            let y_end = ((b + 1) * GRAD_ROW_BLOCK).min(h);
            for y in b * GRAD_ROW_BLOCK..y_end {
                for x in 0..w {
                    let gbase = ((ni * h + y) * w + x) * co;
                    let g = &go[gbase..gbase + co];
                    if g.iter().all(|&v| v == T::zero()) {
                        continue;
                    }
                    for tap in &plan.taps {
                        let yy = y as isize + tap.dy;
                        let xx = x as isize + tap.dx;
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let ibase = ((ni * h + yy as usize) * w + xx as usize) * ci;
                        let kbase = tap.index * ci * co;
                        for c in 0..ci {
                            let v = xd[ibase + c];
                            if v == T::zero() {
                                continue;
                            }
                            let v = v.f64();
                            let dst = &mut part[kbase + c * co..kbase + (c + 1) * co];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += v * gv.f64();
                            }
                        }
                    }
                }
            }
            part
        })
        .collect();
    let mut gk = vec![0.0f64; ksize];
    for part in &partials {
        for (a, &b) in gk.iter_mut().zip(part) {
            *a += b;
        }
    }

    let mut gb = vec![0.0f64; co];
    for pix in go.chunks(co) {
        for (a, &g) in gb.iter_mut().zip(pix) {
            *a += g.f64();
        }
    }

    ConvGrads {
        input: Tensor::new(s.to_vec(), gin).expect("input grad shape"),
        kernel: Tensor::new(
            kernel.shape().to_vec(),
            gk.into_iter().map(T::of).collect(),
        )
        .expect("kernel grad shape"),
        bias: Tensor::new(vec![co], gb.into_iter().map(T::of).collect()).expect("bias grad shape"),
    }
}

/// Zero-padded convolution whose output has the same spatial size as the input.
pub fn conv2d_same<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new::<T>(kernel.shape(), None)?;
    conv_forward(input, kernel, bias, &plan)
}

/// [`conv2d_same`] with the kernel multiplied elementwise by a spatial mask.
pub fn masked_conv2d_same<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(kernel.shape(), Some(mask))?;
    conv_forward(input, kernel, bias, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straightforward six-loop reference, independent of the plan/tap code.
    fn naive_conv(x: &Tensor<f32>, k: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let [n, h, w, ci] = x.shape().try_into().unwrap();
        let [kh, kw, _, co] = k.shape().try_into().unwrap();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = vec![0.0f64; n * h * w * co];
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    for o in 0..co {
                        let mut s = b.data()[o] as f64;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as isize + ky as isize - ph as isize;
                                let ix = xx as isize + kx as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    let v = x.data()
                                        [((ni * h + iy as usize) * w + ix as usize) * ci + c];
                                    let kv = k.data()[((ky * kw + kx) * ci + c) * co + o];
                                    s += v as f64 * kv as f64;
                                }
                            }
                        }
                        out[((ni * h + y) * w + xx) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn one_by_one_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5, 1], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0f32);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d_same(&x, &k, &b).unwrap(), x);
    }

    #[test]
    fn delta_response() {
        let mut x = Tensor::<f32>::zeros(&[1, 5, 5, 1]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let k = Tensor::full(&[3, 3, 1, 1], 1.0f32);
        let out = conv2d_same(&x, &k, &Tensor::zeros(&[1])).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                let expect = if (1..=3).contains(&y) && (1..=3).contains(&xx) { 1.0 } else { 0.0 };
                assert_eq!(out.data()[y * 5 + xx], expect, "({y},{xx})");
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 5, 7, 2], &mut rng);
        let k = random(&[3, 3, 2, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let fast = conv2d_same(&x, &k, &b).unwrap();
        for (a, e) in fast.data().iter().zip(naive_conv(&x, &k, &b)) {
            assert!((*a as f64 - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn matches_naive_loops_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..50 {
            let n = rng.gen_range(1..3);
            let h = rng.gen_range(1..9);
            let w = rng.gen_range(1..9);
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..5);
            let kh = 2 * rng.gen_range(0..3) + 1;
            let kw = 2 * rng.gen_range(0..3) + 1;
            let x = random(&[n, h, w, ci], &mut rng);
            let k = random(&[kh, kw, ci, co], &mut rng);
            let b = random(&[co], &mut rng);
            let fast = conv2d_same(&x, &k, &b).unwrap();
            for (a, e) in fast.data().iter().zip(naive_conv(&x, &k, &b)) {
                assert!((*a as f64 - e).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let err = conv2d_same(&x, &Tensor::zeros(&[2, 3, 2, 1]), &Tensor::zeros(&[1]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("kh=2"), "{err}");
        let err = conv2d_same(&x, &Tensor::zeros(&[3, 3, 3, 1]), &Tensor::zeros(&[1]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("in=3"), "{err}");
        let err = conv2d_same(&x, &Tensor::zeros(&[3, 4, 2, 1]), &Tensor::zeros(&[1]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("kw=4"), "{err}");
    }
}
