use super::{Float, ParamStore};

/// Stochastic gradient descent with momentum and L2 weight decay:
///
/// ```text
/// v <- momentum * v + (g + decay * p)
/// p <- p - lr * v
/// ```
///
/// Gradients are left in place; the caller zeroes them.
#[derive(Clone, Debug)]
pub struct Sgd<T: Float> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, velocity: Vec<Vec<T>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect();
        }
        let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for id in params.ids().collect::<Vec<_>>() {
            if params.is_frozen(id) {
                continue;
            }
            let p = params.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            let v = &mut self.velocity[id.index()];
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
            p.grad = Some(grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn store(p: &[f64], g: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[p.len()], p).unwrap());
        s.get_mut(id).grad = Some(g.to_vec());
        s
    }

    #[test]
    fn plain_step() {
        let mut s = store(&[1.0, -2.0], &[0.5, 0.25]);
        Sgd::new(0.0, 0.0).step(&mut s, 0.1);
        let p = s.get(s.find("p").unwrap());
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
        // gradients are left untouched
        assert_eq!(p.grad.as_ref().unwrap(), &[0.5, 0.25]);
    }

    #[test]
    fn zero_grad_no_change() {
        let mut s = store(&[1.0, -2.0], &[0.0, 0.0]);
        Sgd::new(0.9, 0.0).step(&mut s, 0.1);
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn momentum_recursion() {
        // v1 = g1, p1 = p0 - lr*g1; v2 = 0.9*g1 + g2, p2 = p1 - lr*v2
        let (p0, g1, g2, lr) = (1.0, 0.5, -0.2, 0.1);
        let mut s = store(&[p0], &[g1]);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, lr);
        let id = s.find("p").unwrap();
        s.get_mut(id).grad = Some(vec![g2]);
        opt.step(&mut s, lr);
        let expected = p0 - lr * g1 - lr * (0.9 * g1 + g2);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched() {
        let mut s = store(&[1.0], &[1.0]);
        s.freeze_all(true);
        Sgd::new(0.9, 1e-4).step(&mut s, 0.1);
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.0]);
    }
}
