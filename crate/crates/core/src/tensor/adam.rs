//! Adam with bias correction. Hyperparameters beyond the learning rate use
//! the canonical defaults (beta1 0.9, beta2 0.999, eps 1e-8).

use super::{Scalar, Shape5, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[Shape5]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Self {
        let shapes: Vec<Shape5> = params.iter().map(Tensor::shape).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {} grads {} state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let one = T::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = state.beta1 * *mv + (one - state.beta1) * gv;
            *vv = state.beta2 * *vv + (one - state.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::filled([1, 1, 1, 1, 3], 1.5)];
        let g = vec![Tensor::<f64>::zeros([1, 1, 1, 1, 3])];
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        assert_eq!(p[0].data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m_hat / sqrt(v_hat) = sign(g) exactly on the first step, so the
        // update magnitude is lr up to the epsilon correction.
        for &g0 in &[3.0f64, -0.25, 1e4] {
            let mut p = vec![Tensor::<f64>::filled([1, 1, 1, 1, 1], 0.0)];
            let g = vec![Tensor::<f64>::filled([1, 1, 1, 1, 1], g0)];
            let mut s = AdamState::for_params(&p);
            adam_step(&mut p, &g, &mut s, 0.05).unwrap();
            let update = p[0].data()[0];
            assert!((update.abs() - 0.05).abs() < 1e-6, "magnitude {update}");
            assert_eq!(update.signum(), -g0.signum());
        }
    }

    #[test]
    fn converges_on_quadratic_and_matches_scalar_reference() {
        // Independent scalar Adam, written from the update equations.
        let (b1, b2, eps, lr) = (0.9f64, 0.999, 1e-8, 0.05);
        let mut x_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);

        let mut p = vec![Tensor::<f64>::filled([1, 1, 1, 1, 1], 1.0)];
        let mut s = AdamState::for_params(&p);
        for t in 1..=200 {
            let g_ref = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x_ref -= lr * mhat / (vhat.sqrt() + eps);

            let g = vec![Tensor::<f64>::filled([1, 1, 1, 1, 1], 2.0 * p[0].data()[0])];
            adam_step(&mut p, &g, &mut s, lr).unwrap();
            assert!(
                (p[0].data()[0] - x_ref).abs() < 1e-12,
                "diverged from reference at step {t}"
            );
        }
        assert!(x_ref.abs() < 0.1, "final x {x_ref}");
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = vec![Tensor::<f32>::zeros([1, 1, 1, 1, 2])];
        let g = vec![Tensor::<f32>::zeros([1, 1, 1, 1, 3])];
        let mut s = AdamState::for_params(&p);
        assert!(adam_step(&mut p, &g, &mut s, 0.1).is_err());
    }
}
