use super::{Result, Tensor, TensorError};

/// First/second moment buffers for Adam, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized state with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!(
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        let g = vec![0.0; 3];
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&[1.0]], &mut st, 1e-4).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((1.0 - p.data()[0] - 1e-4).abs() < 1e-11);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut a = Tensor::new(vec![2], vec![0.3, 0.3]).unwrap();
        let mut st = AdamState::new([&a]);
        for k in 0..5 {
            let g = [0.1 * k as f64, 0.1 * k as f64];
            adam_step(&mut [&mut a], &[&g], &mut st, 1e-2).unwrap();
        }
        assert_eq!(a.data()[0], a.data()[1]);
    }

    #[test]
    fn misaligned_shapes_error() {
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[&[1.0]], &mut st, 1e-3).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
