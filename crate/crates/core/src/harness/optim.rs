use crate::tensor::{Parameterized, Real};

/// Adam over every non-frozen parameter of a model.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients, scaled by `grad_scale`.
    pub fn step<T: Real>(&mut self, model: &mut impl Parameterized<T>, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let lr_t = self.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let eps = self.eps;
        let mut slot = 0;
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p| {
            if moments.len() <= slot {
                moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut moments[slot];
            slot += 1;
            if p.frozen {
                return;
            }
            for i in 0..p.len() {
                let g = p.grad[i].as_f64() * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr_t * m[i] / (v[i].sqrt() + eps);
                p.value[i] = T::of(p.value[i].as_f64() - update);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    struct Quad {
        x: Param<f64>,
        y: Param<f64>,
    }

    impl Parameterized<f64> for Quad {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.x);
            f(&self.y);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.x);
            f(&mut self.y);
        }
    }

    #[test]
    fn minimizes_and_respects_frozen() {
        let mut q = Quad {
            x: Param::filled("x", vec![1], 3.0),
            y: Param::filled("y", vec![1], 3.0),
        };
        q.y.frozen = true;
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            q.x.grad[0] = 2.0 * (q.x.value[0] - 1.0);
            q.y.grad[0] = 2.0 * q.y.value[0];
            opt.step(&mut q, 1.0);
        }
        assert!((q.x.value[0] - 1.0).abs() < 1e-3);
        assert_eq!(q.y.value[0], 3.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quad {
            x: Param::filled("x", vec![1], 0.0),
            y: Param::filled("y", vec![1], 0.0),
        };
        q.x.grad[0] = 5.0;
        Adam::new(1e-3).step(&mut q, 1.0);
        assert!((q.x.value[0] + 1e-3).abs() < 1e-9);
    }
}
