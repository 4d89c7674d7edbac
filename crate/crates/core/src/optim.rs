//! First-order optimizers over [`Params`].

use serde::{Deserialize, Serialize};

use crate::model::Params;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Optimizer state. Parameters are rounded back onto the `f32` grid after
/// every update.
#[derive(Clone, Debug)]
pub struct Optimizer {
    settings: OptimizerSettings,
    first: Params,
    second: Params,
    steps: i32,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings, like: &Params) -> Self {
        Self {
            settings,
            first: like.zeros_like(),
            second: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let s = self.settings;
        self.steps = self.steps.saturating_add(1);
        match s.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -s.learning_rate),
            OptimizerKind::Adam => {
                let bias1 = 1.0 - s.beta1.powi(self.steps);
                let bias2 = 1.0 - s.beta2.powi(self.steps);
                let p_slices = params.slices_mut();
                let m_slices = self.first.slices_mut();
                let v_slices = self.second.slices_mut();
                for (((p, m), v), g) in p_slices
                    .into_iter()
                    .zip(m_slices)
                    .zip(v_slices)
                    .zip(grads.slices())
                {
                    for i in 0..p.len() {
                        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
                        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        p[i] -= s.learning_rate * m_hat / (v_hat.sqrt() + s.eps);
                    }
                }
            }
        }
        params.quantize_f32();
    }
}
