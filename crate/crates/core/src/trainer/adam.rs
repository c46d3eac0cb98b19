use serde::{Deserialize, Serialize};

use super::model::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: ToyModel,
    v: ToyModel,
    t: i32,
}

impl Adam {
    pub fn new(model: &ToyModel, params: AdamParams) -> Self {
        Adam { params, m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, model: &mut ToyModel, grad: &ToyModel) {
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let moments = self.m.params_mut().zip(self.v.params_mut());
        for ((theta, g), (m, v)) in model.params_mut().zip(grad.params()).zip(moments) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}
