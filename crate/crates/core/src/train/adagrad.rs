/// Adagrad: `acc += g^2; param -= lr * g / (sqrt(acc) + eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Adagrad {
    pub fn new(learning_rate: f64, epsilon: f64) -> Self {
        Adagrad {
            learning_rate,
            epsilon,
        }
    }

    pub fn step_scalar(&self, param: &mut f64, grad: f64, acc: &mut f64) {
        *acc += grad * grad;
        *param -= self.learning_rate * grad / (acc.sqrt() + self.epsilon);
    }

    pub fn step(&self, param: &mut [f64], grad: &[f64], acc: &mut [f64]) {
        debug_assert!(param.len() == grad.len() && grad.len() == acc.len());
        for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
            self.step_scalar(p, g, a);
        }
    }

    /// Step on `grad * scale`, for gradients stored as batch sums.
    pub fn step_scaled(&self, param: &mut [f64], grad: &[f64], acc: &mut [f64], scale: f64) {
        debug_assert!(param.len() == grad.len() && grad.len() == acc.len());
        for ((p, &g), a) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
            self.step_scalar(p, g * scale, a);
        }
    }
}

/// Free-function form of one Adagrad update over a dense slice.
pub fn adagrad_step(param: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, eps: f64) {
    Adagrad::new(lr, eps).step(param, grad, acc);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = [1.5, -2.0];
        let mut a = [0.0, 3.0];
        adagrad_step(&mut p, &[0.0, 0.0], &mut a, 0.1, 1e-8);
        assert_eq!(p, [1.5, -2.0]);
        assert_eq!(a, [0.0, 3.0]);
    }

    #[test]
    fn hand_computed_step() {
        let mut p = [1.0];
        let mut a = [0.0];
        adagrad_step(&mut p, &[2.0], &mut a, 0.1, 1e-8);
        assert_eq!(a, [4.0]);
        let oracle = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert_eq!(p[0], oracle);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn successive_steps_shrink() {
        let mut p = [0.0];
        let mut a = [0.0];
        adagrad_step(&mut p, &[1.0], &mut a, 0.1, 1e-8);
        let first = p[0].abs();
        let before = p[0];
        adagrad_step(&mut p, &[1.0], &mut a, 0.1, 1e-8);
        let second = (p[0] - before).abs();
        assert!(second < first);
        assert!(a[0] >= 1.0);
    }
}
