use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment buffers for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zeroed buffers mirroring `shapes`.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self { v: m.clone(), m, t: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, epsilon: ADAM_EPSILON }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.expect_same_shape("adam_step", g)?;
        p.expect_same_shape("adam_step", m)?;
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((theta, &g), m), v) in iter {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![0.1, -2.0, 7.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([p.shape()]);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 1e-4).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut st = AdamState::new([p.shape()]);
        adam_step(&mut [&mut p], &[g], &mut st, 1e-4).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let expected = 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] + expected).abs() < 1e-18);
        assert_eq!(p.data()[0], -p.data()[1]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new([p.shape()]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 1e-4).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut st, 1e-4).is_err());
    }
}
