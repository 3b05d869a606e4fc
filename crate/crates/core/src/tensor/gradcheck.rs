//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::{Bound, ParamStore, Tensor};
use crate::error::{shape_err, Result};

/// Worst disagreement between analytic and numeric gradients.
///
/// The relative error of coordinate `i` is
/// `|a_i − n_i| / max(|a_i|, |n_i|, 1e-3·‖a‖∞, 1e-12)`: coordinates far below
/// the gradient's own scale are measured against that scale instead of
/// against themselves, where roundoff in the difference quotient dominates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut out = GradCheck {
        checked: analytic.len(),
        ..GradCheck::default()
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        out.max_abs_err = out.max_abs_err.max(abs);
        out.max_rel_err = out.max_rel_err.max(rel);
    }
    out
}

fn scalar_output(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.len() != 1 {
        return Err(shape_err("grad_check", format!("function must return a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks `d f / d x` at `x` with central differences of width `2·step`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&g, xv)?;
    scalar_output(out)?;
    let analytic = g.backward(out)?.get_or_zeros(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.param(t);
        scalar_output(f(&g, v)?)
    };
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }
    Ok(compare(analytic.data(), &numeric))
}

/// Checks the gradient of `f` with respect to every scalar in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let bound = store.bind(&g);
    let out = f(&g, &bound)?;
    scalar_output(out)?;
    let grads = bound.collect(&g.backward(out)?);

    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let b = s.bind(&g);
        scalar_output(f(&g, &b)?)
    };
    // One flat comparison, so a tensor whose true gradient is exactly zero
    // is judged against the scale of the whole gradient, not against its
    // own finite-difference noise.
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    let mut work = store.clone();
    for (id, analytic) in store.ids().zip(&grads) {
        let original = store.get(id).clone();
        for i in 0..original.len() {
            let base = original.data()[i];
            work.get_mut(id).data_mut()[i] = base + step;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = base - step;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = base;
            all_numeric.push((fp - fm) / (2.0 * step));
        }
        all_analytic.extend_from_slice(analytic.data());
    }
    Ok(compare(&all_analytic, &all_numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([7], 1.0, &mut rng);
        let r = grad_check(|_, v| v.sum(), &x, 1e-5).unwrap();
        assert!(r.max_abs_err < 1e-9, "{r:?}");

        // Exact analytic value.
        let g = Graph::new();
        let v = g.param(x.clone());
        let s = v.sum().unwrap();
        let grad = g.backward(s).unwrap();
        assert!(grad.get(v).unwrap().data().iter().all(|&d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn square_has_doubled_gradient() {
        let x = Tensor::new([3], vec![0.5, -1.5, 2.0]).unwrap();
        let r = grad_check(|_, v| v.mul(&v)?.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::zeros([2]);
        assert!(grad_check(|_, v| v.scale(2.0), &x, 1e-5).is_err());
    }
}
