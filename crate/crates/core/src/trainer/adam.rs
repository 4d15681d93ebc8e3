use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// Adam with bias correction over every trainable tensor of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let first: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, _, t)| {
                if t.requires_grad {
                    vec![0.0; t.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let second = first.clone();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }

    /// Applies one update from the gradients stored on `params`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (_, name, t) in params.iter() {
            if let (true, Some(g)) = (t.requires_grad, &t.grad) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: name.to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let i = id.index();
            if self.first[i].len() != t.len() {
                self.first[i] = vec![0.0; t.len()];
                self.second[i] = vec![0.0; t.len()];
            }
            let grad = t.grad.take().unwrap_or_else(|| vec![0.0; t.len()]);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, x) in t.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}
