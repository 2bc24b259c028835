//! Central-difference gradient verification. Runs in 64-bit; the step is
//! scaled by element magnitude.

use super::{Scalar, Tensor};

/// Max over all elements of all checked tensors of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// `loss` evaluates the scalar objective for a candidate set of tensors;
/// `analytic` returns one gradient tensor per input tensor.
pub fn max_rel_error<L, G>(loss: L, analytic: G, tensors: &[Tensor<f64>], eps: f64) -> f64
where
    L: Fn(&[Tensor<f64>]) -> f64,
    G: Fn(&[Tensor<f64>]) -> Vec<Tensor<f64>>,
{
    let grads = analytic(tensors);
    assert_eq!(grads.len(), tensors.len(), "one gradient per tensor");
    let mut work: Vec<Tensor<f64>> = tensors.to_vec();
    let mut max_err = 0.0f64;
    for ti in 0..tensors.len() {
        assert_eq!(grads[ti].shape(), tensors[ti].shape());
        for j in 0..tensors[ti].numel() {
            let x0 = tensors[ti].data()[j];
            let h = eps * x0.abs().max(1.0);
            work[ti].data_mut()[j] = x0 + h;
            let fp = loss(&work);
            work[ti].data_mut()[j] = x0 - h;
            let fm = loss(&work);
            work[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads[ti].data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Fixed random projection used to reduce a tensor output to a scalar loss.
pub fn projection(shape: super::Shape5, seed: u64) -> Tensor<f64> {
    let mut rng = super::Rng::from_seed(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

/// Positive projection with magnitudes bounded away from zero, for checks of
/// piecewise-linear ops where tiny true gradients would let floating-point
/// noise dominate the relative error.
pub fn projection_bounded(shape: super::Shape5, seed: u64) -> Tensor<f64> {
    let mut rng = super::Rng::from_seed(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(0.5, 1.5)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::super::ops::*;
    use super::super::{Rng, Tensor};
    use super::*;

    fn random_tensor(shape: super::super::Shape5, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = Rng::from_seed(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        for &stride in &[1usize, 2] {
            let x = random_tensor([1, 2, 4, 4, 4], 10 + stride as u64, -1.0, 1.0);
            let w = random_tensor([3, 2, 3, 3, 3], 20 + stride as u64, -0.5, 0.5);
            let b = random_tensor([3, 1, 1, 1, 1], 30, -0.1, 0.1);
            let out_shape = conv3d_forward(&x, &w, b.data(), stride).unwrap().shape();
            let r = projection(out_shape, 99);
            let loss = |ts: &[Tensor<f64>]| {
                let y = conv3d_forward(&ts[0], &ts[1], ts[2].data(), stride).unwrap();
                dot(&y, &r)
            };
            let analytic = |ts: &[Tensor<f64>]| {
                let (gx, gw, gb) = conv3d_backward(&ts[0], &ts[1], stride, &r).unwrap();
                vec![gx, gw, Tensor::from_vec([3, 1, 1, 1, 1], gb).unwrap()]
            };
            let err = max_rel_error(loss, analytic, &[x, w, b], 1e-5);
            assert!(err < 1e-6, "stride {stride}: max rel err {err}");
        }
    }

    #[test]
    fn leaky_relu_gradient() {
        // Keep inputs away from the kink at 0; the larger step is still exact
        // for a piecewise-linear map.
        let mut x = random_tensor([1, 2, 3, 3, 3], 7, -2.0, 2.0);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.5;
            }
        }
        let r = projection_bounded(x.shape(), 42);
        let err = max_rel_error(
            |ts| dot(&leaky_relu_forward(&ts[0], 0.01), &r),
            |ts| vec![leaky_relu_backward(&ts[0], 0.01, &r)],
            &[x],
            1e-3,
        );
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn instance_norm_gradient() {
        let x = random_tensor([2, 2, 3, 3, 3], 13, -2.0, 2.0);
        let gamma = random_tensor([2, 1, 1, 1, 1], 14, 0.5, 1.5);
        let beta = random_tensor([2, 1, 1, 1, 1], 15, -0.5, 0.5);
        let r = projection(x.shape(), 43);
        let eps = 1e-5;
        let loss = |ts: &[Tensor<f64>]| {
            let (y, _) = instance_norm_forward(&ts[0], ts[1].data(), ts[2].data(), eps);
            dot(&y, &r)
        };
        let analytic = |ts: &[Tensor<f64>]| {
            let (_, saved) = instance_norm_forward(&ts[0], ts[1].data(), ts[2].data(), eps);
            let (gx, gg, gb) = instance_norm_backward(&ts[0], ts[1].data(), &saved, &r);
            vec![
                gx,
                Tensor::from_vec([2, 1, 1, 1, 1], gg).unwrap(),
                Tensor::from_vec([2, 1, 1, 1, 1], gb).unwrap(),
            ]
        };
        let err = max_rel_error(loss, analytic, &[x, gamma, beta], 1e-5);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn max_pool_gradient_away_from_ties() {
        let x = random_tensor([2, 3, 3, 3, 3], 21, -1.0, 1.0);
        let r = projection_bounded([2, 3, 1, 1, 1], 44);
        let err = max_rel_error(
            |ts| {
                let (y, _) = global_max_pool_forward(&ts[0]);
                dot(&y, &r)
            },
            |ts| {
                let (_, am) = global_max_pool_forward(&ts[0]);
                vec![global_max_pool_backward(ts[0].shape(), &am, &r)]
            },
            &[x],
            1e-6,
        );
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn dense_gradient_is_machine_exact() {
        // Magnitudes bounded below so no true gradient is near zero; an
        // affine map makes central differences exact up to rounding.
        let mut x = random_tensor([2, 4, 1, 1, 1], 31, -1.0, 1.0);
        for v in x.data_mut() {
            *v = v.signum() * (0.3 + 0.7 * v.abs());
        }
        let w = random_tensor([3, 4, 1, 1, 1], 32, 0.1, 1.0);
        let b = random_tensor([3, 1, 1, 1, 1], 33, -1.0, 1.0);
        let r = projection_bounded([2, 3, 1, 1, 1], 45);
        let err = max_rel_error(
            |ts| dot(&dense_forward(&ts[0], &ts[1], ts[2].data()).unwrap(), &r),
            |ts| {
                let (gx, gw, gb) = dense_backward(&ts[0], &ts[1], &r);
                vec![gx, gw, Tensor::from_vec([3, 1, 1, 1, 1], gb).unwrap()]
            },
            &[x, w, b],
            1e-3,
        );
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn sigmoid_softmax_upsample_scale_gradients() {
        let x = random_tensor([1, 4, 2, 2, 2], 51, -2.0, 2.0);
        let r = projection(x.shape(), 46);
        let err = max_rel_error(
            |ts| dot(&sigmoid_forward(&ts[0]), &r),
            |ts| {
                let y = sigmoid_forward(&ts[0]);
                vec![sigmoid_backward(&y, &r)]
            },
            &[x.clone()],
            1e-5,
        );
        assert!(err < 1e-7, "sigmoid err {err}");

        let err = max_rel_error(
            |ts| dot(&softmax_channels_forward(&ts[0]), &r),
            |ts| {
                let y = softmax_channels_forward(&ts[0]);
                vec![softmax_channels_backward(&y, &r)]
            },
            &[x.clone()],
            1e-5,
        );
        assert!(err < 1e-7, "softmax err {err}");

        let r_up = projection_bounded([1, 4, 4, 4, 4], 47);
        let err = max_rel_error(
            |ts| dot(&upsample_repeat_forward(&ts[0], 2), &r_up),
            |ts| vec![upsample_repeat_backward(ts[0].shape(), 2, &r_up)],
            &[x.clone()],
            1e-3,
        );
        assert!(err < 1e-9, "upsample err {err}");

        let r_pos = projection_bounded(x.shape(), 46);
        let xs = random_tensor([1, 4, 2, 2, 2], 53, 0.3, 1.0);
        let gates = random_tensor([1, 4, 1, 1, 1], 52, 0.1, 0.9);
        let err = max_rel_error(
            |ts| dot(&scale_channels_forward(&ts[0], &ts[1]).unwrap(), &r_pos),
            |ts| {
                let (gx, gg) = scale_channels_backward(&ts[0], &ts[1], &r_pos);
                vec![gx, gg]
            },
            &[xs, gates],
            1e-3,
        );
        assert!(err < 1e-9, "scale err {err}");
    }

    #[test]
    fn dropout_gradient_with_frozen_mask() {
        let x = random_tensor([1, 2, 3, 3, 3], 61, -1.0, 1.0);
        let mut rng = Rng::from_seed(62);
        let (_, keep) = dropout_forward(&x, 0.3, &mut rng, true);
        let r = projection_bounded(x.shape(), 48);
        let keep2 = keep.clone();
        let r2 = r.clone();
        let err = max_rel_error(
            move |ts: &[Tensor<f64>]| {
                // Same mask applied directly: dropout with the mask frozen.
                let scale = 1.0 / 0.7;
                let mut acc = 0.0;
                for ((&v, &k), &rv) in ts[0].data().iter().zip(&keep2).zip(r2.data()) {
                    if k {
                        acc += v * scale * rv;
                    }
                }
                acc
            },
            |_| vec![dropout_backward(0.3, &keep, &r)],
            &[x.clone()],
            1e-3,
        );
        assert!(err < 1e-9, "dropout err {err}");
    }
}
