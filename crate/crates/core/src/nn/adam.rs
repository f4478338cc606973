use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        AdamState {
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Usage(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Usage(format!("adam: shape mismatch at tensor {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - T::lit(state.beta1.powi(t));
    let c2 = T::one() - T::lit(state.beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_vec(&[2], vec![1.5, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap()];
        let g = vec![Tensor::from_vec(&[1], vec![0.37]).unwrap()];
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lr() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut s = AdamState::for_params(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 0.1).is_err());
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.0).is_err());
    }
}
