use super::{Tape, Tensor, TensorError, Var};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central differences with step `eps`.
///
/// The error per coordinate is `|analytic − numeric| / max(1, |analytic|)`.
/// `f` must be deterministic: it is evaluated twice at `x` and rejected if the
/// two values differ (which is what an active dropout mask looks like).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_with(f, x, eps, &all)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_with<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::invalid("grad_check", "eps must be positive"));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        let y = value.item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let y0 = tape.item(loss);
    if !y0.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    if eval(x)?.to_bits() != y0.to_bits() {
        return Err(TensorError::invalid(
            "grad_check",
            "function is not deterministic (dropout active?)",
        ));
    }
    let grads = tape.backward(loss)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
