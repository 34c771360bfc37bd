//! Adam with standard bias correction. Moment buffers are owned by the
//! state and aligned positionally with the parameter list.

use super::{Element, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone)]
struct Moments<E: Element> {
    m: Vec<E>,
    v: Vec<E>,
}

/// Optimizer state: first/second moment buffers plus the step counter.
/// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8, learning_rate = 0.001.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element = f32> {
    pub learning_rate: E,
    pub beta1: E,
    pub beta2: E,
    pub epsilon: E,
    step: u64,
    moments: Vec<Moments<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &[Tensor<E>]) -> Self {
        AdamState {
            learning_rate: E::from_f64(0.001),
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            epsilon: E::from_f64(1e-8),
            step: 0,
            moments: params
                .iter()
                .map(|p| Moments {
                    m: vec![E::zero(); p.numel()],
                    v: vec![E::zero(); p.numel()],
                })
                .collect(),
        }
    }

    pub fn with_learning_rate(mut self, lr: E) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over all parameters. A parameter with no
    /// accumulated gradient is treated as having zero gradient.
    pub fn step(&mut self, params: &[Tensor<E>]) -> TensorResult<()> {
        if params.len() != self.moments.len() {
            return Err(TensorError::AxisMismatch {
                axis: "parameter count",
                left: params.len(),
                right: self.moments.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = E::from_f64(1.0 - self.beta1.to_f64().powi(t));
        let bc2 = E::from_f64(1.0 - self.beta2.to_f64().powi(t));
        let one = E::one();
        for (p, mom) in params.iter().zip(self.moments.iter_mut()) {
            if p.numel() != mom.m.len() {
                return Err(TensorError::AxisMismatch {
                    axis: "parameter extent",
                    left: p.numel(),
                    right: mom.m.len(),
                });
            }
            let grad = p.grad();
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(E::zero(), |g| g[i]);
                mom.m[i] = self.beta1 * mom.m[i] + (one - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (one - self.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] = data[i] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor<f64> {
        Tensor::param(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = param(&[1.0, -2.0, 3.0]);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        st.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        // With constant gradient g the bias-corrected first step is
        // lr * g / (|g| + eps) ~ lr * sign(g).
        let p = param(&[0.0, 0.0]);
        p.accumulate_grad_for_test(&[2.5, -0.3]);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        st.step(std::slice::from_ref(&p)).unwrap();
        let d = p.to_vec();
        assert!((d[0] + 0.001).abs() < 1e-6);
        assert!((d[1] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn steps_are_reproducible() {
        let run = || {
            let p = param(&[0.5, 1.5]);
            let mut st = AdamState::new(std::slice::from_ref(&p));
            for _ in 0..2 {
                p.zero_grad();
                p.accumulate_grad_for_test(&[0.1, -0.2]);
                st.step(std::slice::from_ref(&p)).unwrap();
            }
            p.to_vec()
        };
        assert_eq!(run(), run());
    }
}

#[cfg(test)]
impl<E: Element> Tensor<E> {
    pub(crate) fn accumulate_grad_for_test(&self, g: &[E]) {
        self.accumulate_grad(g);
    }
}
