//! Central finite-difference checks of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Bound, ParameterStore, Tape, Tensor, Var};

/// Largest disagreement found by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Input (or parameter name) and flat element index of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err;
            self.worst = what();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1e-6)`; the floor keeps gradients that vanish up
/// to roundoff from dominating.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Reduces a tensor output to the scalar `Σ out ⊙ R` with a fixed random `R`.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let r = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Compares the tape gradient of every input element of `f` with a central
/// difference of step `h`. Non-scalar outputs are projected onto a fixed
/// random direction first.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let mut grads = tape.backward(loss)?;
    let mut report = GradCheck::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += h;
            let plus = eval(&shifted)?;
            shifted[k].data_mut()[i] -= 2.0 * h;
            let minus = eval(&shifted)?;
            report.record(|| format!("input {k}[{i}]"), analytic.data()[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Compares the gradient of a scalar loss with respect to every trainable
/// parameter of `params`, probing every `stride`-th element of each tensor.
pub fn check_params(
    params: &ParameterStore,
    h: f64,
    stride: usize,
    f: impl Fn(&mut Tape, &Bound) -> Result<Var>,
) -> Result<GradCheck> {
    if stride == 0 {
        return Err(Error::Parameter("gradient check stride must be positive".into()));
    }
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_constant(&mut tape);
        let loss = f(&mut tape, &bound)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let mut report = GradCheck::new();
    let mut shifted = params.clone();
    for (name, p) in params.iter() {
        if p.frozen {
            continue;
        }
        let analytic = grads
            .take(bound.var(name)?)
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for i in (0..p.value.numel()).step_by(stride) {
            let x = p.value.data()[i];
            shifted.param_mut(name)?.value.data_mut()[i] = x + h;
            let plus = eval(&shifted)?;
            shifted.param_mut(name)?.value.data_mut()[i] = x - h;
            let minus = eval(&shifted)?;
            shifted.param_mut(name)?.value.data_mut()[i] = x;
            report.record(|| format!("{name}[{i}]"), analytic.data()[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_exact_gradient() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let r = check_inputs(&[x], 1e-5, |t, v| t.mul(v[0], v[0])).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // detaching one factor halves the gradient of x²
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = check_inputs(&[x], 1e-5, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            t.mul(v[0], c)
        })
        .unwrap();
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }
}
