use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference step used throughout the verification suite.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compare the tape gradient of the scalar function `f` at `x` against
/// central differences `(f(x+eps) − f(x−eps)) / (2·eps)` on every element.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_sampled(f, x, eps, &all)
}

/// As [`grad_check`], restricted to the flat element indices in `indices`.
pub fn grad_check_sampled<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = f(xv)?;
        let grads = tape.backward(loss)?;
        grads.get_or_zeros(xv)
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let loss = f(tape.constant(probe))?;
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let v = loss.value().item();
        Ok(v)
    };

    let mut max_abs_error: f64 = 0.0;
    let mut scale: f64 = 1e-8;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        max_abs_error = max_abs_error.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    Ok(GradCheckReport {
        max_rel_error: max_abs_error / scale,
        max_abs_error,
        checked: indices.len(),
    })
}
