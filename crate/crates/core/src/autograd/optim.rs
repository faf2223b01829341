use serde::{Deserialize, Serialize};

use super::{mismatch, AutogradError, Real, Tensor};

fn check_shapes(params: &[Tensor], grads: &[Tensor]) -> Result<(), AutogradError> {
    if params.len() != grads.len() {
        return Err(mismatch("optimizer", format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(mismatch("optimizer", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// `p <- p - lr * g - lr * weight_decay * p`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: Real, weight_decay: Real) -> Result<(), AutogradError> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv + lr * weight_decay * *pv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: Real,
    weight_decay: Real,
    hp: AdamParams,
) -> Result<(), AutogradError> {
    check_shapes(params, grads)?;
    check_shapes(&state.m, grads)?;
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, gv) in g.data().iter().enumerate() {
            md[k] = hp.beta1 * md[k] + (1.0 - hp.beta1) * gv;
            vd[k] = hp.beta2 * vd[k] + (1.0 - hp.beta2) * gv * gv;
            let step = (md[k] / c1) / ((vd[k] / c2).sqrt() + hp.eps);
            pd[k] -= lr * step + lr * weight_decay * pd[k];
        }
    }
    Ok(())
}

/// Step decay: `lr * factor ^ floor(epoch / every_n)`.
pub fn lr_at_epoch(lr: Real, factor: Real, every_n: usize, epoch: usize) -> Real {
    if every_n == 0 {
        return lr;
    }
    lr * factor.powi((epoch / every_n) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(x: &Tensor) -> Tensor {
        Tensor::scalar(2.0 * (x.item() - 3.0))
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![Tensor::filled([1, 2, 2, 2], 0.7)];
        let before = p.clone();
        let g = vec![Tensor::zeros([1, 2, 2, 2])];
        sgd_step(&mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &g, 0.1, 0.0, AdamParams::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_solves_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        for _ in 0..200 {
            let g = vec![quad_grad(&p[0])];
            sgd_step(&mut p, &g, 0.1, 0.0).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn adam_solves_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        for _ in 0..500 {
            let g = vec![quad_grad(&p[0])];
            adam_step(&mut s, &mut p, &g, 0.1, 0.0, AdamParams::default()).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros([1, 1, 2, 2])];
        assert!(sgd_step(&mut p, &[Tensor::zeros([1, 1, 1, 2])], 0.1, 0.0).is_err());
        assert!(sgd_step(&mut p, &[], 0.1, 0.0).is_err());
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = vec![Tensor::scalar(2.0)];
        sgd_step(&mut p, &[Tensor::scalar(0.0)], 0.1, 0.5).unwrap();
        assert!((p[0].item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn step_schedule() {
        assert_eq!(lr_at_epoch(0.1, 0.5, 10, 9), 0.1);
        assert_eq!(lr_at_epoch(0.1, 0.5, 10, 10), 0.05);
        assert_eq!(lr_at_epoch(0.1, 0.5, 10, 25), 0.025);
        assert_eq!(lr_at_epoch(0.1, 0.5, 0, 25), 0.1);
    }
}
