//! Adaptive-moment optimizer over dense layer parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{DenseGrads, DenseLayer, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m_weight: Matrix,
    v_weight: Matrix,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

/// Adam with decay rates 0.9 / 0.999 and ε = 1e−8. One instance per
/// parameter partition so each partition keeps its own learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, layers: &mut [&mut DenseLayer], grads: &[DenseGrads]) -> Result<()> {
        if layers.len() != grads.len() {
            return Err(Error::dims("Adam::step", (layers.len(), 0), (grads.len(), 0)));
        }
        if self.moments.is_empty() {
            self.moments = layers
                .iter()
                .map(|l| Moments {
                    m_weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    v_weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    m_bias: vec![0.0; l.out_dim()],
                    v_bias: vec![0.0; l.out_dim()],
                })
                .collect();
        }
        if self.moments.len() != layers.len() {
            return Err(Error::Usage("optimizer bound to a different layer stack".into()));
        }
        for (layer, g) in layers.iter().zip(grads) {
            if layer.weight.shape() != g.weight.shape() || layer.bias.len() != g.bias.len() {
                return Err(Error::dims("Adam::step", layer.weight.shape(), g.weight.shape()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for ((layer, g), mom) in layers.iter_mut().zip(grads).zip(&mut self.moments) {
            update(
                layer.weight.as_mut_slice(),
                mom.m_weight.as_mut_slice(),
                mom.v_weight.as_mut_slice(),
                g.weight.as_slice(),
            );
            update(&mut layer.bias, &mut mom.m_bias, &mut mom.v_bias, &g.bias);
        }
        Ok(())
    }
}
