use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ComSLModel, Forward};
use crate::tensor::{ParamId, TensorError, Var};

/// Up to `per_param` distinct flat coordinates of every parameter tensor.
pub fn sample_param_coords(model: &ComSLModel<f64>, per_param: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let n = p.value.numel();
        if n <= per_param {
            out.extend((0..n).map(|j| (ParamId(i), j)));
        } else {
            let mut picked: Vec<usize> = Vec::with_capacity(per_param);
            while picked.len() < per_param {
                let j = rng.random_range(0..n);
                if !picked.contains(&j) {
                    picked.push(j);
                }
            }
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|j| (ParamId(i), j)));
        }
    }
    out
}

/// Largest relative disagreement between backprop parameter gradients of the
/// scalar built by `f` and central differences over `coords`.
///
/// `f` must be deterministic; anything it captures (teacher distributions,
/// detached targets) is held fixed across the perturbed evaluations.
pub fn param_grad_check<E, F>(model: &ComSLModel<f64>, f: F, eps: f64, coords: &[(ParamId, usize)]) -> Result<f64, E>
where
    F: Fn(&mut Forward<'_, f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |m: &ComSLModel<f64>| -> Result<f64, E> {
        let mut fwd = m.eval();
        let out = f(&mut fwd)?;
        let y = fwd.tape.item(out);
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "param_grad_check" }.into());
        }
        Ok(y)
    };

    let mut fwd = model.train_forward(None);
    let loss = f(&mut fwd)?;
    let y0 = fwd.tape.item(loss);
    if eval(model)?.to_bits() != y0.to_bits() {
        return Err(TensorError::invalid("param_grad_check", "function is not deterministic").into());
    }
    let grads = fwd.backward(loss)?;
    let mut analytic: Vec<Option<&crate::tensor::Tensor<f64>>> = vec![None; model.params().len()];
    for (id, g) in grads.param_grads() {
        analytic[id.0] = Some(g);
    }

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &(id, j) in coords {
        let orig = model.params().get(id).value.data()[j];
        probe.params_mut().get_mut(id).value.data_mut()[j] = orig + eps;
        let plus = eval(&probe)?;
        probe.params_mut().get_mut(id).value.data_mut()[j] = orig - eps;
        let minus = eval(&probe)?;
        probe.params_mut().get_mut(id).value.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[id.0].map_or(0.0, |g| g.data()[j]);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
