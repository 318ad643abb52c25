use super::{Result, Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` records its computation on the given tape starting from the input
/// leaf and returns the scalar output. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad(true));
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("leaf requires grad").to_vec();

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let y = f(&mut t, x)?;
        Ok(t.value(y).data()[0])
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let err = grad_check(
            |t, x| {
                let y = t.relu(x)?;
                t.sum(y)
            },
            &Tensor::scalar(5.0),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }
}
