use super::tensor::{ParamSet, Real, Tensor};

/// Central-difference gradient of `f` at `params`, one scalar entry at a time.
///
/// The divisor is the distance between the two perturbed values as actually
/// stored, which equals `2h` whenever `θ ± h` is representable in `T`.
pub fn finite_diff_gradient<T: Real>(
    mut f: impl FnMut(&ParamSet<T>) -> f64,
    params: &ParamSet<T>,
    h: f64,
) -> ParamSet<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = params.clone();
    let mut out = ParamSet::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.require(&name).expect("name from the set").len();
        let mut grad = vec![0.0f64; len];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = work.get(&name).unwrap().data()[i];
            let plus = T::of(orig.f64() + h);
            let minus = T::of(orig.f64() - h);
            work.get_mut(&name).unwrap().data_mut()[i] = plus;
            let fp = f(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = minus;
            let fm = f(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            *g = (fp - fm) / (plus.f64() - minus.f64());
        }
        let shape = params.get(&name).unwrap().shape().to_vec();
        out.insert(name, Tensor::new(shape, grad).expect("same shape"));
    }
    out
}

/// Largest relative error between two gradient sets over entries whose
/// reference magnitude exceeds `floor`. Returns `(error, name, index)`.
pub fn max_relative_error<T: Real>(
    analytic: &ParamSet<T>,
    reference: &ParamSet<f64>,
    floor: f64,
) -> (f64, String, usize) {
    let mut worst = (0.0, String::new(), 0);
    for (name, r) in reference.iter() {
        let a = analytic.get(name).expect("same parameter names");
        for (i, (&rv, av)) in r.data().iter().zip(a.data()).enumerate() {
            if rv.abs() <= floor {
                continue;
            }
            let err = (av.f64() - rv).abs() / rv.abs().max(av.f64().abs());
            if err > worst.0 {
                worst = (err, name.clone(), i);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::scalar(3.0));
        let g = finite_diff_gradient(
            |p| {
                let x = p.get("x").unwrap().data()[0] as f64;
                x * x
            },
            &p,
            1e-3,
        );
        assert!((g.get("x").unwrap().data()[0] - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn sum_gives_ones() {
        let mut p = ParamSet::<f64>::new();
        p.insert("v", Tensor::from_fn(&[2, 3], |i| i as f64 * 1.7 - 4.0));
        let g = finite_diff_gradient(|p| p.get("v").unwrap().sum_f64(), &p, 1e-3);
        for v in g.get("v").unwrap().data() {
            assert!((v - 1.0).abs() <= 1e-6);
        }
    }
}
